use std::path::PathBuf;

use thiserror::Error;

/// Harness failures, each with a fixed process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Core(tokcom::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Mismatch(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::MissingArtifact(_) => 4,
            _ => 1,
        }
    }
}

impl From<tokcom::Error> for CliError {
    fn from(e: tokcom::Error) -> Self {
        match e {
            tokcom::Error::Diverged { epoch, loss } => CliError::Diverged { epoch, loss },
            other => CliError::Core(other),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
