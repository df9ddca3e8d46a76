use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the archive reader/writer.
#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive {path}: missing tensor(s): {}", names.join(", "))]
    MissingTensor { path: PathBuf, names: Vec<String> },

    #[error("archive {path}: shape mismatch: {}", offenders.join("; "))]
    ShapeMismatch { path: PathBuf, offenders: Vec<String> },

    #[error("archive {path}: corrupted: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("archive {path}: unexpected tensor(s): {}", names.join(", "))]
    UnexpectedTensor { path: PathBuf, names: Vec<String> },
}

#[derive(Debug, Error)]
pub enum EscError {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown class id {id} (embedding table holds {table} classes)")]
    UnknownClass { id: usize, table: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
}

impl EscError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EscError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, EscError>;
