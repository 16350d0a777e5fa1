use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes or dimensions that do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation invoked with arguments inconsistent with the model, such as
    /// evaluating a user through a surface it is not attached to.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("backward pass called with a cache from a different parameter version")]
    StaleCache,

    #[error("network architectures differ: {0}")]
    Architecture(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("mismatched logs: {0}")]
    Mismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
