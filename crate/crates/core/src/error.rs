use thiserror::Error;

/// Errors raised by the estimators and by panel ingestion.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its admissible range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A value required to be positive (or finite) is not.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed input, with a location hint.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// A (unit, time) pair is absent from a long-format panel.
    #[error("incomplete grid: missing cell (unit {unit:?}, time {time:?})")]
    IncompleteGrid { unit: String, time: String },

    #[error("duplicate entry: {0}")]
    Duplicate(String),

    /// A factor matrix is (numerically) rank deficient.
    #[error("rank deficient: {0}")]
    Rank(String),

    /// No point satisfies the constraint set.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Too few positive observations for tail estimation.
    #[error("tail estimation infeasible: {0}")]
    EvtInfeasible(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
