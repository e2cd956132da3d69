use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::pnf::quantile_sorted;
use crate::trainer::EpochMetrics;
use crate::{Error, Result};

const REQUIRED: [&str; 8] = ["epoch", "adq", "td_loss", "cql_loss", "actor_loss", "score", "pnf_accept_rate", "pnf_shortfalls"];

/// Read a metrics JSON-lines file, naming the line and key on failure.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::parse(path, i + 1, "record is not a JSON object"))?;
        if let Some(k) = REQUIRED.iter().find(|k| !obj.contains_key(**k)) {
            return Err(Error::parse(path, i + 1, format!("missing key `{k}`")));
        }
        out.push(serde_json::from_value(value).map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub path: PathBuf,
    pub epochs: usize,
    pub final_score: f64,
    pub final_adq: f64,
    /// Median ADQ over the last `window` epochs.
    pub window_adq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SignSummary {
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
}

impl SignSummary {
    fn of(values: &[f64]) -> Self {
        let mut s = SignSummary::default();
        for v in values {
            if *v < 0.0 {
                s.negative += 1;
            } else if *v > 0.0 {
                s.positive += 1;
            } else {
                s.zero += 1;
            }
        }
        s
    }
}

/// Treatment minus baseline, per seed pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedDiff {
    pub window_adq: Vec<f64>,
    pub final_score: Vec<f64>,
    pub window_adq_signs: SignSummary,
    pub final_score_signs: SignSummary,
    pub median_window_adq: f64,
    pub median_final_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub window: usize,
    pub baseline: Vec<RunSummary>,
    pub treatment: Vec<RunSummary>,
    /// Per epoch, the median ADQ across seeds of each group.
    pub baseline_epoch_adq: Vec<f64>,
    pub treatment_epoch_adq: Vec<f64>,
    pub paired: PairedDiff,
}

fn summarize(path: &Path, m: &[EpochMetrics], window: usize) -> Result<RunSummary> {
    let last = m
        .last()
        .ok_or_else(|| Error::parse(path, 0, "metrics file has no records"))?;
    let tail: Vec<f64> = m[m.len().saturating_sub(window)..].iter().map(|r| r.adq).collect();
    Ok(RunSummary {
        path: path.to_path_buf(),
        epochs: m.len(),
        final_score: last.score,
        final_adq: last.adq,
        window_adq: median(&tail),
    })
}

fn epoch_medians(runs: &[Vec<EpochMetrics>]) -> Vec<f64> {
    let n = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..n).map(|e| median(&runs.iter().map(|r| r[e].adq).collect::<Vec<_>>())).collect()
}

/// Compare baseline runs with treatment runs paired by position (seed).
pub fn compare_runs(baseline: &[PathBuf], treatment: &[PathBuf], window: usize) -> Result<Comparison> {
    if baseline.is_empty() || baseline.len() != treatment.len() {
        return Err(Error::Config("need the same non-zero number of baseline and treatment runs".into()));
    }
    if window == 0 {
        return Err(Error::Config("window must be >= 1".into()));
    }
    let load = |ps: &[PathBuf]| -> Result<Vec<Vec<EpochMetrics>>> { ps.iter().map(|p| read_metrics(p)).collect() };
    let (bm, tm) = (load(baseline)?, load(treatment)?);
    let bs = baseline.iter().zip(&bm).map(|(p, m)| summarize(p, m, window)).collect::<Result<Vec<_>>>()?;
    let ts = treatment.iter().zip(&tm).map(|(p, m)| summarize(p, m, window)).collect::<Result<Vec<_>>>()?;
    let window_adq: Vec<f64> = bs.iter().zip(&ts).map(|(b, t)| t.window_adq - b.window_adq).collect();
    let final_score: Vec<f64> = bs.iter().zip(&ts).map(|(b, t)| t.final_score - b.final_score).collect();
    Ok(Comparison {
        window,
        baseline_epoch_adq: epoch_medians(&bm),
        treatment_epoch_adq: epoch_medians(&tm),
        paired: PairedDiff {
            window_adq_signs: SignSummary::of(&window_adq),
            final_score_signs: SignSummary::of(&final_score),
            median_window_adq: median(&window_adq),
            median_final_score: median(&final_score),
            window_adq,
            final_score,
        },
        baseline: bs,
        treatment: ts,
    })
}

/// One row per seed pair.
pub fn write_comparison_csv(path: &Path, c: &Comparison) -> Result<()> {
    let mut out = String::from("pair,baseline,treatment,baseline_final_score,treatment_final_score,baseline_window_adq,treatment_window_adq,diff_window_adq,diff_final_score\n");
    for (i, (b, t)) in c.baseline.iter().zip(&c.treatment).enumerate() {
        out.push_str(&format!(
            "{i},{},{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            b.path.display(),
            t.path.display(),
            b.final_score,
            t.final_score,
            b.window_adq,
            t.window_adq,
            c.paired.window_adq[i],
            c.paired.final_score[i]
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
