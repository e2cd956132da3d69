use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::ensemble::{true_model_error, DynamicsEnsemble, UncertaintyMode};
use crate::envdata::{Dataset, EnvSpec};
use crate::pnf::{quantile_band, UncertaintyBand};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Low,
    Mid,
    High,
}

impl Category {
    /// `Mid` strictly inside the band, `Low`/`High` on or beyond its edges.
    pub fn of(u: f64, band: &UncertaintyBand) -> Self {
        if band.contains(u) {
            Category::Mid
        } else if u <= band.u_low {
            Category::Low
        } else {
            Category::High
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Low => "low",
            Category::Mid => "mid",
            Category::High => "high",
        })
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Category::Low),
            "mid" => Ok(Category::Mid),
            "high" => Ok(Category::High),
            _ => Err(Error::Config(format!("unknown category `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncErrRecord {
    pub u: f64,
    pub true_error: f64,
    pub category: Category,
}

/// Interquartile band of disagreement over the dataset's own pairs.
pub fn dataset_band(model: &DynamicsEnsemble, dataset: &Dataset) -> Result<UncertaintyBand> {
    let mut u = Vec::with_capacity(dataset.len());
    let all: Vec<_> = dataset.transitions().iter().collect();
    for chunk in all.chunks(4096) {
        let s = Tensor::from_rows(&chunk.iter().map(|t| t.s.as_slice()).collect::<Vec<_>>())?;
        let a = Tensor::from_rows(&chunk.iter().map(|t| t.a.as_slice()).collect::<Vec<_>>())?;
        u.extend(model.uncertainty_batch(&s, &a, UncertaintyMode::DisagreementMaxDev)?);
    }
    quantile_band(&u)
}

/// Disagreement, true one-step error and band category for each pair.
pub fn uncertainty_error_table(
    model: &DynamicsEnsemble,
    spec: &EnvSpec,
    states: &Tensor,
    actions: &Tensor,
    band: &UncertaintyBand,
) -> Result<Vec<UncErrRecord>> {
    if states.is_empty() {
        return Err(Error::Config("uncertainty table needs at least one pair".into()));
    }
    let u = model.uncertainty_batch(states, actions, UncertaintyMode::DisagreementMaxDev)?;
    u.into_iter()
        .enumerate()
        .map(|(i, u)| {
            Ok(UncErrRecord {
                u,
                true_error: true_model_error(model, spec, states.row(i), actions.row(i))?,
                category: Category::of(u, band),
            })
        })
        .collect()
}

/// Ranks starting at 1; ties share their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape("spearman needs two equal-length series of at least 2 values".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Config("spearman undefined for a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn write_unc_err_csv(path: &Path, rows: &[UncErrRecord]) -> Result<()> {
    let mut out = String::from("u,true_error,category\n");
    for r in rows {
        out.push_str(&format!("{:?},{:?},{}\n", r.u, r.true_error, r.category));
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_unc_err_csv(path: &Path) -> Result<Vec<UncErrRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "u,true_error,category")) => {}
        _ => return Err(Error::parse(path, 1, "expected header `u,true_error,category`")),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = |m: String| Error::parse(path, i + 1, m);
            if f.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", f.len())));
            }
            Ok(UncErrRecord {
                u: f[0].parse().map_err(|e| bad(format!("u: {e}")))?,
                true_error: f[1].parse().map_err(|e| bad(format!("true_error: {e}")))?,
                category: f[2].parse().map_err(|e: Error| bad(e.to_string()))?,
            })
        })
        .collect()
}
