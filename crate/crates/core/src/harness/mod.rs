//! Experiment configuration, the runs × settings grid, observed-event
//! ingestion and result reporting.

mod config;
mod grid;
mod ingest;
mod report;

pub use config::{ExperimentConfig, Mode, OmegaRect};
pub use grid::{
    policy_fields, rer, run_grid, Failure, GridOutput, Method, ResultRow, RunRecord, RunTrace, Seeds, Timing,
};
pub use ingest::{ingest_events, ingest_files, observed_roads, Bounds, Ingested, Rejected};
pub use report::{
    estimate_table, format_checks, read_results_csv, result_checks, write_output, write_results_csv, Check,
    ACCURACY_RER, NOT_APPLICABLE, ROBUSTNESS_MARGIN,
};
