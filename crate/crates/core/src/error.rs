use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, sizes or options that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),
    /// The caller asked for something meaningless (empty view list, zero tuples).
    #[error("usage error: {0}")]
    Usage(String),
    /// Input data violates its contract (non-binary labels, delta outside the vocabulary).
    #[error("data error: {0}")]
    Data(String),
    /// A checkpoint or manifest could not be decoded.
    #[error("format error: {0}")]
    Format(String),
    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by how the caller invoked an operation.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
