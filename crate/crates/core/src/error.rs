//! Error type shared by every module of the crate.

use std::fmt;
use std::path::PathBuf;

/// Errors produced by degradekit operations.
#[derive(Debug)]
pub enum Error {
    /// Tensor/matrix dimensions do not line up for the requested operation.
    Shape(String),
    /// An argument violates a precondition (range, positivity, feasibility).
    Invalid(String),
    /// A non-finite value appeared at the named node of the computation graph.
    NonFinite(String),
    /// Iterative optimization produced a non-finite loss.
    Diverged {
        iteration: usize,
        detail: String,
    },
    /// Underlying I/O failure on the given path.
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A file exists but its contents do not match the expected format.
    Format {
        path: PathBuf,
        detail: String,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(node) => write!(f, "non-finite value at node '{node}'"),
            Error::Diverged { iteration, detail } => {
                write!(f, "diverged at iteration {iteration}: {detail}")
            }
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Format { path, detail } => write!(f, "{}: {detail}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
