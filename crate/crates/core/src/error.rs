use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("numeric failure at r={r}, s={s}: {message}")]
    NumericFailure { r: f64, s: f64, message: String },

    /// The inverse clock did not reach the requested level before the base
    /// path ran out. Extend the base path and retry.
    #[error("base path horizon {horizon} exhausted: clock reached {reached} of {target}; extend the base path")]
    HorizonExhausted { horizon: f64, reached: f64, target: f64 },

    #[error("degenerate regime: {0}")]
    DegenerateRegime(String),

    #[error("infeasible scenario: path {path_index} (seed {seed}) still exhausted its horizon after {retries} extensions")]
    InfeasibleScenario { path_index: u64, seed: u64, retries: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn out_of_range(msg: impl Into<String>) -> Error {
    Error::OutOfRange(msg.into())
}
