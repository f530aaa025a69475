use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands (or an operand and a parameter) disagree on shape.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}:{line}: {reason}")]
    Ingestion { path: PathBuf, line: usize, reason: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by the caller's configuration or inputs rather
    /// than by something going wrong at run time.
    pub fn is_configuration(&self) -> bool {
        matches!(self, Error::Shape { .. } | Error::Config { .. })
    }
}
