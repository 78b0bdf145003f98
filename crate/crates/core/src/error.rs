use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the GRIP library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, range, symmetry).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no convergence after {sweeps} sweeps (off-diagonal residual {residual:.3e})")]
    Convergence { sweeps: usize, residual: f64 },

    #[error("numerical failure: {message} (condition estimate {condition:.3e})")]
    Numerical { message: String, condition: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {kind} data: {message}")]
    Format { kind: &'static str, message: String },

    /// A pretraining fixture failed its quality gate (seed rejected).
    #[error("fixture rejected: {0}")]
    Fixture(String),

    #[error("run diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
