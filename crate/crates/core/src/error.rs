use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GarnerError {
    /// A graph or matrix violates a structural requirement (symmetry, id range, duplicates).
    #[error("structural error: {0}")]
    Structural(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("regular graph certification failed after {attempts} attempts (n={n}, d={d})")]
    Certification { n: usize, d: usize, attempts: usize },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = GarnerError> = std::result::Result<T, E>;

impl GarnerError {
    pub(crate) fn dims(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        GarnerError::DimensionMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GarnerError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        GarnerError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
