//! Command-line pipeline: synthetic data, training, prediction, evaluation,
//! ensembles and submissions, all driven by one TOML config per run.

pub mod checkpoint_io;
pub mod commands;
pub mod config;
pub mod submission;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use commands::{run, Command};
pub use config::{ExperimentConfig, ModelFile};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: chainstack::tensor::CheckpointError },
    #[error(transparent)]
    Dataset(#[from] chainstack::ingest::DatasetError),
    #[error(transparent)]
    Synth(#[from] chainstack::ingest::SynthError),
    #[error(transparent)]
    Model(#[from] chainstack::models::ModelError),
    #[error(transparent)]
    Metrics(#[from] chainstack::metrics::MetricsError),
    #[error(transparent)]
    Stack(#[from] chainstack::ensemble::StackError),
    #[error(transparent)]
    PredFile(#[from] chainstack::ensemble::PredFileError),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}
