//! Toy environments, offline datasets and their CSV persistence.

mod dataset;
mod env;
mod io;

pub use dataset::{
    generate_dataset, normalized_score, sample_batch, sample_indices, split_train_val, Behavior, Dataset,
    Transition, TransitionMeta,
};
pub use env::{
    env_step, reset, run_episode, EnvName, EnvSpec, ExpertController, Policy, StepOutcome, UniformPolicy,
    GOAL_RADIUS, MAZE_GOAL, MAZE_WALLS,
};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
