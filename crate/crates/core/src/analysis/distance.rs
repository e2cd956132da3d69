use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::ConservativeAgent;
use crate::ensemble::{DynamicsEnsemble, Normalizer};
use crate::envdata::Dataset;
use crate::pnf::quantile_sorted;
use crate::rng;
use crate::trainer::{branched_rollout, start_state_batch, TrainCfg};
use crate::{Error, Result};

/// Distance from each query to its nearest reference point (brute force).
pub fn nn_l2_distances(queries: &[&[f64]], reference: &[&[f64]]) -> Result<Vec<f64>> {
    if reference.is_empty() {
        return Err(Error::Config("nearest-neighbour reference set is empty".into()));
    }
    let dim = reference[0].len();
    if reference.iter().chain(queries).any(|r| r.len() != dim) {
        return Err(Error::Shape(format!("all points must be {dim}-dimensional")));
    }
    Ok(queries
        .iter()
        .map(|q| {
            reference
                .iter()
                .map(|r| q.iter().zip(*r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

/// Distances to the dataset's states, optionally after z-scoring every
/// coordinate with the dataset's state statistics.
pub fn nn_distances_to_dataset(queries: &[Vec<f64>], reference: &Dataset, normalized: bool) -> Result<Vec<f64>> {
    let refs: Vec<&[f64]> = reference.states().collect();
    if !normalized {
        let q: Vec<&[f64]> = queries.iter().map(Vec::as_slice).collect();
        return nn_l2_distances(&q, &refs);
    }
    let dim = reference.env().state_dim;
    let norm = Normalizer::fit(refs.iter().copied(), dim);
    let z = |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(j, v)| (v - norm.shift[j]) / norm.scale[j]).collect() };
    let rz: Vec<Vec<f64>> = refs.iter().map(|r| z(r)).collect();
    let qz: Vec<Vec<f64>> = queries.iter().map(|q| z(q)).collect();
    nn_l2_distances(
        &qz.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        &rz.iter().map(Vec::as_slice).collect::<Vec<_>>(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub median: f64,
}

/// Equal-width histogram over `[min, max]`; the maximum lands in the last
/// bin. A zero-width range puts everything in the last bin.
pub fn histogram(values: &[f64], n_bins: usize) -> Result<HistogramSpec> {
    if values.is_empty() || n_bins == 0 {
        return Err(Error::Config("histogram needs values and at least one bin".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("histogram input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|i| if i == n_bins { hi } else { lo + width * i as f64 }).collect();
    let mut counts = vec![0; n_bins];
    for &v in values {
        let bin = if width > 0.0 { (((v - lo) / width).floor() as usize).min(n_bins - 1) } else { n_bins - 1 };
        counts[bin] += 1;
    }
    Ok(HistogramSpec {
        edges,
        counts,
        median: quantile_sorted(&sorted, 0.5),
    })
}

/// Unseen states visited by model rollouts from one start batch.
#[derive(Debug, Clone)]
pub struct RolloutDistances {
    pub baseline: Vec<f64>,
    pub augmented: Vec<f64>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.5)
}

impl RolloutDistances {
    pub fn baseline_median(&self) -> f64 {
        median(&self.baseline)
    }

    pub fn augmented_median(&self) -> f64 {
        median(&self.augmented)
    }
}

/// Roll out the same model and policy snapshot from a plain start batch
/// and from an augmented one (`cfg.f_aug`, `cfg.pnf`), and measure how far
/// the visited states lie from the dataset. Visited states are every
/// predicted next state plus the augmented start states themselves.
pub fn rollout_distance_study<R: Rng + ?Sized>(
    dataset: &Dataset,
    agent: &ConservativeAgent,
    model: &DynamicsEnsemble,
    cfg: &TrainCfg,
    rng: &mut R,
) -> Result<RolloutDistances> {
    let run = |c: &TrainCfg, mut starts: rng::Stream, mut roll: rng::Stream| -> Result<Vec<f64>> {
        let start = start_state_batch(dataset, agent, model, c, &mut starts)?;
        let out = branched_rollout(model, agent, &start.states, c.H, c.rollout_policy, &mut roll)?;
        let mut visited: Vec<Vec<f64>> = start.replaced_slots.iter().map(|&i| start.states.row(i).to_vec()).collect();
        visited.extend(out.transitions().iter().map(|t| t.s_next.clone()));
        nn_distances_to_dataset(&visited, dataset, false)
    };
    // Both arms share the dataset sample and the rollout noise.
    let starts = rng::child(rng);
    let roll = rng::child(rng);
    let baseline = run(&TrainCfg { f_aug: 0.0, ..cfg.clone() }, starts.clone(), roll.clone())?;
    let augmented = run(cfg, starts, roll)?;
    Ok(RolloutDistances { baseline, augmented })
}
