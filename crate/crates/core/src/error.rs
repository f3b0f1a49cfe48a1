//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the cost models, oracles, protocol and simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Vector or matrix length disagrees with the problem dimension.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension {
        /// Expected length.
        expected: usize,
        /// Actual length.
        actual: usize,
    },

    /// A parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A numerical routine failed to converge or produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The convex solver could not certify a solution.
    #[error("solver failure: {0}")]
    Solver(String),

    /// A portfolio-manager oracle failed.
    #[error("oracle {pm} failed: {reason}")]
    Oracle {
        /// Index of the failing manager.
        pm: usize,
        /// Underlying reason.
        reason: String,
    },

    /// Configuration is malformed or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Required input data is missing or unreadable.
    #[error("missing input: {0}")]
    MissingInput(String),

    /// Scenario comparison inputs do not share seeds.
    #[error("comparison mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension { expected, actual })
    }
}
