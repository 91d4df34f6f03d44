use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty vector")]
    EmptyVector,

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: bad magic bytes (expected {expected:?})", path.display())]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{}: unsupported format version {version}", path.display())]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{}: feature dimension {actual} does not match expected {expected}", path.display())]
    FeatureDimMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{}: truncated payload ({context})", path.display())]
    Truncated { path: PathBuf, context: &'static str },

    #[error("unknown {kind} strategy {name:?} (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("AUC undefined: {0}")]
    AucUndefined(String),

    #[error("non-finite value while probing parameter {tensor}[{index}]")]
    NonFiniteProbe { tensor: &'static str, index: usize },

    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(&'static str),

    #[error("non-finite loss at epoch {epoch}, bag {bag}")]
    NonFiniteLoss { epoch: usize, bag: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code for the CLI: 1 for bad input, 2 for runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. }
            | Error::NonFiniteGradient(_)
            | Error::NonFiniteInput(_)
            | Error::NonFiniteProbe { .. }
            | Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
