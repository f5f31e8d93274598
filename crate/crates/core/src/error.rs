use thiserror::Error;

/// Errors raised by the portfolio engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("singular volatility at node {node}: condition estimate {condition:.3e} exceeds cap {cap:.3e}")]
    SingularVolatility { node: usize, condition: f64, cap: f64 },

    #[error("initial wealth {x0} is not attainable: bracket expansion failed after {doublings} doublings")]
    UnattainableBudget { x0: f64, doublings: usize },

    #[error("policy evaluation failed at node {node}: {reason}")]
    PolicyEvaluation { node: usize, reason: String },

    #[error("{path}: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn numeric(msg: impl Into<String>) -> Error {
    Error::NumericFailure(msg.into())
}
