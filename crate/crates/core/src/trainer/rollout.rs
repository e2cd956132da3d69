use std::collections::VecDeque;

use rand::Rng;

use crate::agent::ConservativeAgent;
use crate::diffcore::Tensor;
use crate::ensemble::DynamicsEnsemble;
use crate::envdata::{Transition, UniformPolicy};
use crate::{Error, Result};

use super::config::RolloutPolicy;

/// Transitions produced by [`branched_rollout`]. The constructor is private
/// so only model output can reach a [`RolloutBuffer`].
#[derive(Debug, Clone)]
pub struct Rollout {
    transitions: Vec<Transition>,
    /// Branches cut short by a non-finite model prediction.
    pub truncated: usize,
}

impl Rollout {
    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Roll every start state `horizon` steps through the model. Branches are
/// advanced in lockstep; a branch whose prediction is non-finite stops and
/// is counted in [`Rollout::truncated`]. Model rollouts never terminate.
pub fn branched_rollout<R: Rng + ?Sized>(
    model: &DynamicsEnsemble,
    agent: &ConservativeAgent,
    starts: &Tensor,
    horizon: usize,
    policy: RolloutPolicy,
    rng: &mut R,
) -> Result<Rollout> {
    if horizon == 0 {
        return Err(Error::Config("rollout horizon must be >= 1".into()));
    }
    let da = agent.action_dim();
    let mut alive: Vec<usize> = (0..starts.rows()).collect();
    let mut states = starts.clone();
    let mut per_branch: Vec<Vec<Transition>> = vec![Vec::with_capacity(horizon); starts.rows()];
    let mut truncated = 0;
    for _ in 0..horizon {
        if alive.is_empty() {
            break;
        }
        let actions = match policy {
            RolloutPolicy::CurrentPi => agent.sample_actions(&states, rng)?.actions,
            RolloutPolicy::Uniform => {
                let rows: Vec<Vec<f64>> = (0..states.rows()).map(|_| UniformPolicy.sample(da, rng)).collect();
                Tensor::from_rows(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>())?
            }
        };
        let (next, rewards) = model.sample_transitions(&states, &actions, rng)?;
        let mut keep = Vec::with_capacity(alive.len());
        for (k, &b) in alive.iter().enumerate() {
            let sn = next.row(k);
            if !rewards[k].is_finite() || sn.iter().any(|v| !v.is_finite()) {
                truncated += 1;
                continue;
            }
            per_branch[b].push(Transition {
                s: states.row(k).to_vec(),
                a: actions.row(k).to_vec(),
                r: rewards[k],
                s_next: sn.to_vec(),
                done: false,
            });
            keep.push(k);
        }
        alive = keep.iter().map(|&k| alive[k]).collect();
        if alive.is_empty() {
            break;
        }
        let rows: Vec<&[f64]> = keep.iter().map(|&k| next.row(k)).collect();
        states = Tensor::from_rows(&rows)?;
    }
    Ok(Rollout {
        transitions: per_branch.into_iter().flatten().collect(),
        truncated,
    })
}

/// Bounded FIFO of model-generated transitions.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "rollout buffer capacity must be positive");
        RolloutBuffer {
            items: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// Append a rollout, evicting the oldest transitions beyond capacity.
    pub fn push(&mut self, rollout: Rollout) {
        for t in rollout.transitions {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(t);
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        crate::envdata::sample_indices(self.items.len(), n, rng)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}
