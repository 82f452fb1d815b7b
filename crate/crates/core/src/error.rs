use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite values in {stage} (layer {layer})")]
    Numeric { stage: &'static str, layer: usize },

    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    #[error("model state: {0}")]
    ModelState(String),

    #[error("ingestion failed for {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Autograd(#[from] uvae_autograd::AutogradError),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
