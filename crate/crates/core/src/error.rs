use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FdaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FdaError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("phantom generation failed: {0}")]
    Phantom(String),

    #[error("non-finite loss at step {step}: l_seg={l_seg}, l_reg={l_reg}")]
    NonFinite { step: usize, l_seg: f64, l_reg: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl FdaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FdaError::Io { path: path.into(), source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        FdaError::Json { context: context.into(), source }
    }

    /// Errors caused by bad user input rather than by a failing computation.
    pub fn is_validation(&self) -> bool {
        if let FdaError::Io { source, .. } = self {
            return source.kind() == std::io::ErrorKind::NotFound;
        }
        matches!(
            self,
            FdaError::Json { .. }
                | FdaError::Shape(_)
                | FdaError::InvalidVolume(_)
                | FdaError::Config(_)
                | FdaError::Empty(_)
        )
    }
}
