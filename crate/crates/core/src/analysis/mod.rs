//! Diagnostics as data: nearest-neighbour distances and their histograms,
//! uncertainty versus true model error, and run comparisons.

mod compare;
mod distance;
mod uncertainty;

pub use compare::{compare_runs, read_metrics, write_comparison_csv, Comparison, PairedDiff, RunSummary, SignSummary};
pub use distance::{histogram, nn_l2_distances, nn_distances_to_dataset, rollout_distance_study, HistogramSpec, RolloutDistances};
pub use uncertainty::{
    dataset_band, read_unc_err_csv, spearman, uncertainty_error_table, write_unc_err_csv, Category, UncErrRecord,
};
