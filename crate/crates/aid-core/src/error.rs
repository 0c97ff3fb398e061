//! Crate-wide error type and the CLI exit-code mapping.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, naming both sides.
    #[error("dimension mismatch in {op}: left shape {lhs:?}, right shape {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Non-finite values where finite math was required.
    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// Invalid configuration value or inconsistent settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or mismatched on-disk artifact.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code: numeric failures are 2, every other failure is 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } => 2,
            _ => 1,
        }
    }
}
