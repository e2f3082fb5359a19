use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Every variant maps onto a stable, machine-parseable category (see
/// [`Error::category`]) so that the CLI can print a single-line diagnostic.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("integrity check failed for `{blob}`: {reason}")]
    Integrity { blob: String, reason: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn integrity(blob: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            blob: blob.into(),
            reason: reason.into(),
        }
    }

    /// Short category tag used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Numeric(_) => "numeric",
            Error::Domain(_) => "domain",
            Error::Integrity { .. } => "integrity",
            Error::Io { .. } => "io",
            Error::Manifest { .. } => "manifest",
            Error::Config(_) => "config",
            Error::Tensor(_) => "tensor",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
