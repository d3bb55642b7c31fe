//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Two tensors (or a tensor and an op contract) disagree on shape.
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    /// A forward op produced NaN or Inf.
    NonFinite { op: String },
    /// Caller violated an operation precondition.
    InvalidArgument(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// A data file failed to parse; carries the offending line.
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    /// Checkpoint file is malformed, truncated, or version-incompatible.
    Checkpoint(String),
    /// Config file rejected (unknown key, bad value).
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                op,
                expected,
                actual,
            } => write!(f, "shape mismatch in {op}: expected {expected}, got {actual}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Parse { path, line, msg } => {
                write!(f, "parse error at {path}:{line}: {msg}")
            }
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
