//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A dataset or argument failed a structural precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A random split left one half without both populations.
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    /// A treatment arm or population required for fitting is empty.
    #[error("positivity violation in sample: {0}")]
    Positivity(String),

    /// Only one of the two populations is present.
    #[error("population overlap violation: {0}")]
    PopulationOverlap(String),

    /// A conditional W-cell has zero probability.
    #[error("empty cell: nu(v,w) = {0} is not positive")]
    EmptyCell(f64),

    /// An iterative solver did not reach its tolerance.
    #[error("solver failed: {message} (residual {residual:.3e})")]
    SolverFailed { message: String, residual: f64 },

    /// CSV ingestion failed.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
