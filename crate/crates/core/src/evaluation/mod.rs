//! Splits, label subsampling, metrics, the evaluation grid and its reports.

pub mod grid;
pub mod metrics;
pub mod report;
pub mod split;

pub use grid::{cell_id, median, ratio_label, run_grid, GridData, GridSettings, GridSpec, StageConfigs};
pub use metrics::{epochs_to_fraction, metrics, record_convergence, Metrics};
pub use report::{emit_report, read_grid_csv, read_report, render_markdown};
pub use split::{split_dataset, split_indices, subsample_indices, subsample_labels, Split, SplitIndices, SplitSpec};
