use std::path::PathBuf;

use gad_core::discriminator::CheckpointError;
use gad_core::evaluation::EvalError;
use gad_core::feature_store::ManifestError;
use gad_core::scoring::ScoringError;
use gad_core::synth::SynthError;
use gad_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Manifest(_) => "manifest",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Train(_) => "train",
            CliError::Scoring(_) => "scoring",
            CliError::Eval(_) => "eval",
            CliError::Synth(_) => "synth",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({"error": {"kind": self.kind(), "message": self.to_string()}})
    }
}

pub fn io_error(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.into(),
        message: e.to_string(),
    }
}
