use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed JSON: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: invalid field `{field}`: {message}")]
    Validation {
        line: usize,
        field: String,
        message: String,
    },

    #[error("bad format: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input not in chronological order: {0}")]
    Ordering(String),

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(line: usize, field: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input data or configuration rather
    /// than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Format(_)
                | Error::Ordering(_)
                | Error::Config(_)
        )
    }
}
