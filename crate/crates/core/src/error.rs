use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A dense computation would exceed the configured size cap.
    #[error("resource limit: {0}")]
    Resource(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: byte offset {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("not a critical point: gradient norm {grad_norm:.3e} exceeds tolerance {tolerance:.3e}")]
    NotCritical { grad_norm: f64, tolerance: f64 },

    #[error("diverged at t = {time}: loss {loss:.6e} exceeds {limit:.6e}")]
    Divergence { time: f64, loss: f64, limit: f64 },

    #[error(
        "loss increased by {increase:.3e} at t = {time}; retry with step <= {suggested_step:.3e}"
    )]
    NonMonotone {
        time: f64,
        increase: f64,
        suggested_step: f64,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
