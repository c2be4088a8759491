//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated (k > N, empty set, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor or point-set shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is inconsistent or out of range.
    #[error("invalid config: {0}")]
    Config(String),

    /// A data file failed to parse.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A file parsed but its contents are unusable (empty, non-finite rows, ...).
    #[error("invalid data in {path}: {msg}")]
    InvalidData { path: String, msg: String },

    /// Checkpoint container is corrupt or from an incompatible build.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Checkpoint was produced under a different architecture config.
    #[error("config fingerprint mismatch: checkpoint {found:#018x}, expected {expected:#018x}")]
    Fingerprint { found: u64, expected: u64 },

    /// Optimizer or graph state is missing something required (e.g. grads).
    #[error("state error: {0}")]
    State(String),

    /// Training produced a non-finite loss or a numeric check failed.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
