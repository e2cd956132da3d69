use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::env::{run_episode, EnvSpec, ExpertController, UniformPolicy};
use crate::rng;
use crate::{Error, Result};

const MEDIUM_NOISE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

/// Behaviour policy used to generate a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Random,
    Medium,
    ReplayMix,
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Behavior::Random => "random",
            Behavior::Medium => "medium",
            Behavior::ReplayMix => "replay_mix",
        })
    }
}

impl FromStr for Behavior {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Behavior::Random),
            "medium" => Ok(Behavior::Medium),
            "replay_mix" => Ok(Behavior::ReplayMix),
            other => Err(Error::Config(format!("unknown behavior `{other}`"))),
        }
    }
}

/// Episode bookkeeping for one dataset row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionMeta {
    pub episode: usize,
    pub step: usize,
    /// Policy that produced the row; never `ReplayMix`.
    pub behavior: Behavior,
}

/// Immutable offline dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    transitions: Vec<Transition>,
    meta: Vec<TransitionMeta>,
    env: EnvSpec,
    source: String,
}

impl Dataset {
    pub fn new(env: EnvSpec, source: impl Into<String>, transitions: Vec<Transition>, meta: Vec<TransitionMeta>) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::Config("a dataset needs at least one transition".into()));
        }
        if meta.len() != transitions.len() {
            return Err(Error::Shape("transition metadata length mismatch".into()));
        }
        for (i, t) in transitions.iter().enumerate() {
            if t.s.len() != env.state_dim || t.s_next.len() != env.state_dim || t.a.len() != env.action_dim {
                return Err(Error::Shape(format!("transition {i} does not match {} dimensions", env.name)));
            }
            if !t.s.iter().chain(&t.a).chain(&t.s_next).all(|v| v.is_finite()) || !t.r.is_finite() {
                return Err(Error::NonFinite(format!("transition {i}")));
            }
        }
        Ok(Dataset {
            transitions,
            meta,
            env,
            source: source.into(),
        })
    }

    /// Dataset from bare transitions, numbered as one episode.
    pub fn from_transitions(env: EnvSpec, source: impl Into<String>, transitions: Vec<Transition>, behavior: Behavior) -> Result<Self> {
        let meta = (0..transitions.len())
            .map(|step| TransitionMeta { episode: 0, step, behavior })
            .collect();
        Dataset::new(env, source, transitions, meta)
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn meta(&self) -> &[TransitionMeta] {
        &self.meta
    }

    pub fn env(&self) -> &EnvSpec {
        &self.env
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.transitions.iter().map(|t| t.s.as_slice())
    }

    fn subset(&self, idx: &[usize], tag: &str) -> Result<Dataset> {
        Dataset::new(
            self.env,
            format!("{}{tag}", self.source),
            idx.iter().map(|&i| self.transitions[i].clone()).collect(),
            idx.iter().map(|&i| self.meta[i]).collect(),
        )
    }

    /// Contiguous prefix holding `fraction` of the transitions (at least one).
    /// Episodes are cut at the transition boundary, not kept whole.
    pub fn front_fraction(&self, fraction: f64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("dataset fraction {fraction} outside (0, 1]")));
        }
        let n = ((self.len() as f64 * fraction + 1e-9).floor() as usize).max(1);
        let idx: Vec<usize> = (0..n).collect();
        self.subset(&idx, &format!(":front{fraction}"))
    }
}

/// Roll episodes with the named behaviour until exactly `n_transitions`
/// rows are collected. `ReplayMix` alternates random and medium episodes,
/// starting with random.
pub fn generate_dataset(spec: &EnvSpec, behavior: Behavior, n_transitions: usize, seed: u64) -> Result<Dataset> {
    if n_transitions == 0 {
        return Err(Error::Config("n_transitions must be >= 1".into()));
    }
    let mut r = rng::stream(seed);
    let expert = ExpertController::new(spec.name);
    let mut transitions = Vec::with_capacity(n_transitions);
    let mut meta = Vec::with_capacity(n_transitions);
    let mut episode = 0;
    while transitions.len() < n_transitions {
        let ep_behavior = match behavior {
            Behavior::ReplayMix if episode % 2 == 0 => Behavior::Random,
            Behavior::ReplayMix => Behavior::Medium,
            b => b,
        };
        let (_, steps) = run_episode(
            spec,
            |s, r| match ep_behavior {
                Behavior::Random => UniformPolicy.sample(spec.action_dim, r),
                _ => expert.noisy(s, MEDIUM_NOISE, r),
            },
            &mut r,
        );
        for (step, (s, a, out)) in steps.into_iter().enumerate() {
            if transitions.len() == n_transitions {
                break;
            }
            transitions.push(Transition {
                s,
                a,
                r: out.r,
                s_next: out.s_next,
                done: out.done,
            });
            meta.push(TransitionMeta { episode, step, behavior: ep_behavior });
        }
        episode += 1;
    }
    Dataset::new(*spec, format!("{behavior}:seed={seed}"), transitions, meta)
}

/// Shuffle and split into `floor(n * (1 - val_fraction))` training rows and
/// the remainder.
pub fn split_train_val(d: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let n = d.len();
    let n_train = (n as f64 * (1.0 - val_fraction) + 1e-9).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "split of {n} rows at val_fraction {val_fraction} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed));
    Ok((d.subset(&idx[..n_train], ":train")?, d.subset(&idx[n_train..], ":val")?))
}

/// Uniform indices with replacement.
pub fn sample_indices<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..len)).collect()
}

pub fn sample_batch<'a, R: Rng + ?Sized>(d: &'a Dataset, n: usize, rng: &mut R) -> Vec<&'a Transition> {
    sample_indices(d.len(), n, rng)
        .into_iter()
        .map(|i| &d.transitions[i])
        .collect()
}

/// `100 * (ret - random) / (expert - random)`.
pub fn normalized_score(mean_return: f64, spec: &EnvSpec) -> Result<f64> {
    let span = spec.expert_return - spec.random_return;
    if span == 0.0 || !span.is_finite() {
        return Err(Error::Config(format!("{} reference returns are degenerate", spec.name)));
    }
    Ok(100.0 * (mean_return - spec.random_return) / span)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envdata::EnvName;

    fn maze() -> EnvSpec {
        EnvSpec::unreferenced(EnvName::PointMaze)
    }

    #[test]
    fn exact_size_and_determinism() {
        let d1 = generate_dataset(&maze(), Behavior::Medium, 1, 0).unwrap();
        assert_eq!(d1.len(), 1);
        let a = generate_dataset(&maze(), Behavior::ReplayMix, 700, 5).unwrap();
        let b = generate_dataset(&maze(), Behavior::ReplayMix, 700, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 700);
        assert!(generate_dataset(&maze(), Behavior::Random, 0, 0).is_err());
        assert!("expert".parse::<Behavior>().is_err());
    }

    #[test]
    fn replay_mix_has_both_sources() {
        let d = generate_dataset(&maze(), Behavior::ReplayMix, 1000, 1).unwrap();
        assert!(d.meta().iter().any(|m| m.behavior == Behavior::Random));
        assert!(d.meta().iter().any(|m| m.behavior == Behavior::Medium));
    }

    #[test]
    fn medium_beats_random_on_maze() {
        let mean_return = |d: &Dataset| {
            let mut per_ep = std::collections::BTreeMap::<usize, f64>::new();
            for (t, m) in d.transitions().iter().zip(d.meta()) {
                *per_ep.entry(m.episode).or_default() += t.r;
            }
            // Drop the truncated final episode.
            per_ep.pop_last();
            per_ep.values().sum::<f64>() / per_ep.len() as f64
        };
        for seed in 0..5 {
            let med = generate_dataset(&maze(), Behavior::Medium, 10_000, seed).unwrap();
            let rnd = generate_dataset(&maze(), Behavior::Random, 10_000, seed).unwrap();
            assert!(mean_return(&med) > mean_return(&rnd), "seed {seed}");
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let d = generate_dataset(&maze(), Behavior::Random, 10, 2).unwrap();
        let (tr, va) = split_train_val(&d, 0.2, 7).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        let mut all: Vec<_> = tr.transitions().iter().chain(va.transitions()).map(|t| format!("{t:?}")).collect();
        let mut orig: Vec<_> = d.transitions().iter().map(|t| format!("{t:?}")).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(split_train_val(&d, 0.2, 7).unwrap(), (tr, va));
        assert!(split_train_val(&d, 0.95, 7).is_err());
        assert!(split_train_val(&d, 1.0, 7).is_err());
    }

    #[test]
    fn sampling_is_uniform_and_reproducible() {
        let d = generate_dataset(&maze(), Behavior::Random, 1, 2).unwrap();
        let b = sample_batch(&d, 1, &mut rng::stream(0));
        assert_eq!(b[0], &d.transitions()[0]);

        let mut r1 = rng::stream(3);
        let mut r2 = rng::stream(3);
        assert_eq!(sample_indices(10, 50, &mut r1), sample_indices(10, 50, &mut r2));

        let n = 100_000;
        let mut counts = [0usize; 4];
        for i in sample_indices(4, n, &mut rng::stream(11)) {
            counts[i] += 1;
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - n as f64 / 4.0).powi(2) / (n as f64 / 4.0)).sum();
        // 3 degrees of freedom, 99.9% quantile.
        assert!(chi2 < 16.27, "chi2 {chi2}");
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn score_anchors() {
        let mut spec = maze();
        spec.random_return = 0.0;
        spec.expert_return = 10.0;
        assert_eq!(normalized_score(7.0, &spec).unwrap(), 70.0);
        assert_eq!(normalized_score(0.0, &spec).unwrap(), 0.0);
        assert_eq!(normalized_score(10.0, &spec).unwrap(), 100.0);
        spec.expert_return = 0.0;
        assert!(normalized_score(1.0, &spec).is_err());
    }

    #[test]
    fn front_fraction_takes_prefix() {
        let d = generate_dataset(&maze(), Behavior::Medium, 100, 2).unwrap();
        let h = d.front_fraction(0.5).unwrap();
        assert_eq!(h.transitions(), &d.transitions()[..50]);
        assert!(d.front_fraction(0.0).is_err());
    }
}
