//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's preconditions (bad dimensions,
    /// nonpositive sizes, non-finite values, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The object is not in a state that supports the requested operation.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// An iterative method ran out of iterations. Carries the last estimate
    /// so callers can still inspect how far it got.
    #[error("no convergence after {iters} iterations (last estimate {last_estimate})")]
    NoConvergence { iters: usize, last_estimate: f64 },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {message}")]
    Training { step: u64, message: String },

    /// Configuration file or override problem.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint file malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}
