//! Training loops: the plain model-based conservative loop and the variant
//! whose rollout start states are partly replaced by perturb-and-filter
//! augmentations.

mod augmented;
mod baseline;
mod config;
mod eval;
mod rollout;

pub use augmented::{fit_model, run, run_with_model, start_state_batch, EpochMetrics, RunArtifacts, StartBatch, Trainer};
pub use baseline::{baseline_metrics, run_baseline};
pub use config::{RolloutPolicy, TrainCfg, HORIZON_PRESETS};
pub use eval::evaluate_policy;
pub use rollout::{branched_rollout, Rollout, RolloutBuffer};
