//! Experiment configuration, runners, persistence and reporting.

mod config;
mod manifest;
mod oracle_suite;
mod report;
mod run;
mod study;
mod table;

use thiserror::Error;

pub use config::{CrosscoderSection, ExperimentConfig, Profile, MAX_DEPTH};
pub use manifest::{file_sha256, OutputEntry, RunManifest, CODE_VERSION};
pub use oracle_suite::{run_oracle_suite, OracleCheck, OracleReport, SuiteSettings};
pub use report::{render_report, svg_line_chart, Series};
pub use run::{load_snapshots, run_depth_sweep, run_points, run_probe_sweep, run_scenario, write_results, RunRecord, SavedRun, SweepPoint};
pub use study::{planted_recipe, planted_recovery, run_crosscoder_study, shared_inputs, StudyResult};
pub use table::{aggregate, format_value, metric_rows, read_rows, write_rows, CsvRow, SummaryRow, HEADER, SUMMARY_HEADER};

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "FORGETTING_OUT_DIR";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Runtime(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("snapshot directory {0} is missing or empty")]
    MissingSnapshots(String),
}

impl ExperimentError {
    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        ExperimentError::Io { path: path.display().to_string(), message: e.to_string() }
    }

    pub(crate) fn runtime(e: impl std::fmt::Display) -> Self {
        ExperimentError::Runtime(e.to_string())
    }
}
