use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("size mismatch: expected {expected}, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("support violation: q has zero mass at index {index} where p = {p}")]
    SupportViolation { index: usize, p: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("token id {token} outside vocabulary of size {size}")]
    InvalidToken { token: u8, size: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad class of the error, used by the CLI to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Validation(_) | Error::VersionMismatch { .. } | Error::Corrupt { .. } => ErrorClass::Validation,
            Error::InvalidArgument(_) => ErrorClass::Validation,
            _ => ErrorClass::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Validation,
    Runtime,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
