use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants follow the failure classes used by the CLI exit codes:
/// format and integrity problems are data errors, usage errors are caller
/// mistakes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {file} at row {row}: {msg}")]
    Format { file: String, row: usize, msg: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("feature leakage: `{0}` is a label and must not be encoded")]
    Leakage(String),

    #[error("resource error: {0}")]
    Resource(String),

    #[error("dataset validation failed with {} violation(s)", .0.len())]
    Validation(Vec<crate::data::Violation>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(file: impl Into<String>, row: usize, msg: impl Into<String>) -> Self {
        Error::Format { file: file.into(), row, msg: msg.into() }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
