//! Model-based offline reinforcement learning with a conservative
//! actor-critic, a probabilistic dynamics ensemble, and perturb-and-filter
//! (PnF) augmentation of rollout start states.
//!
//! Module map:
//! - [`diffcore`]: dense tensors, MLPs with reverse-mode gradients, Adam.
//! - [`envdata`]: toy environments, offline dataset generation and CSV I/O.
//! - [`ensemble`]: Gaussian dynamics ensemble and uncertainty estimators.
//! - [`agent`]: twin-critic conservative agent with a squashed Gaussian policy.
//! - [`pnf`]: Q-gradient and random perturbation proposals with uncertainty filtering.
//! - [`trainer`]: branched rollouts and the training loops.
//! - [`analysis`]: nearest-neighbour distances, histograms and run comparison.

pub mod agent;
pub mod analysis;
pub mod diffcore;
pub mod ensemble;
pub mod envdata;
mod error;
pub mod kv;
pub mod pnf;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
