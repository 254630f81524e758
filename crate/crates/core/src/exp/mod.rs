//! Config-driven experiments: parsing, execution and artifact summaries.

pub mod config;
pub mod runner;
pub mod stats;

pub use config::{ExperimentConfig, ExperimentKind, TaskParams};
pub use runner::{
    format_rows, resolve_out_dir, run_experiment, summarize, RunReport, Summary, SummaryRow,
};
pub use stats::{median, quantile, spearman, Stat};
