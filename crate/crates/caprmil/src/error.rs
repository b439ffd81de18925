//! Crate-wide error type.
//!
//! Errors are grouped into coarse categories so callers (in particular the
//! command-line frontend) can map them onto distinct exit codes without
//! matching on every variant.

use std::path::PathBuf;

/// Everything that can go wrong inside the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid hyperparameter or configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape mismatch; the message names the offending shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Dataset-level problem: manifests, labels, splits.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary artifact (bag file or checkpoint).
    #[error("format error: {0}")]
    Format(String),

    /// I/O failure with the path that caused it.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Metric is undefined for the given inputs (e.g. single-class AUC).
    #[error("metric error: {0}")]
    Metric(String),
}

/// Coarse grouping used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Caller supplied an invalid configuration.
    Config,
    /// The input data or an on-disk artifact is unusable.
    Data,
    /// Internal or numeric failure while running.
    Runtime,
}

impl Error {
    /// Shorthand constructors; keeps call sites readable.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn metric(msg: impl Into<String>) -> Self {
        Error::Metric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Which exit-code bucket this error belongs to.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Data(_) | Error::Format(_) | Error::Io { .. } => ErrorCategory::Data,
            Error::Shape(_) | Error::Metric(_) => ErrorCategory::Runtime,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
