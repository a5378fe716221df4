use std::io;
use std::path::PathBuf;

use retina_bench::dataset::DatasetError;
use retina_bench::imaging::PipelineError;
use retina_bench::metrics::MetricsError;
use retina_bench::stats::StatsError;
use retina_bench::train::TrainError;
use retina_bench::zoo::ModelError;
use thiserror::Error;

use crate::config::ConfigError;

/// Exit status for configuration problems.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for everything that fails after the config was accepted.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifacts: {0}")]
    MissingArtifacts(PathBuf),
    #[error("missing metric: {0}")]
    MissingMetric(String),
    #[error("run {run_id}: {source}")]
    Run { run_id: String, source: Box<CliError> },
    #[error("panicked: {0}")]
    Panicked(String),
    #[error("{failed} of {total} grid runs failed")]
    GridFailures { failed: usize, total: usize },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: PipelineError },
    #[error("plot {path}: {reason}")]
    Plot { path: PathBuf, reason: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }

    pub fn in_run(self, run_id: &str) -> Self {
        Self::Run { run_id: run_id.to_string(), source: Box::new(self) }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
