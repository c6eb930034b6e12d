use thiserror::Error;

/// Errors raised by the estimators, the synthesis code and the harness.
#[derive(Debug, Error)]
pub enum IsacError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("infeasible angles: {0}")]
    InfeasibleAngles(String),
    #[error("ill-conditioned system ({context}), condition estimate {condition:.3e}")]
    Conditioning { context: String, condition: f64 },
    #[error("numerical failure at iteration {iteration}: {context}")]
    Numerical { iteration: usize, context: String },
    #[error("instance too large for exhaustive decoding: {0} hypotheses")]
    TooLarge(u128),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, IsacError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(IsacError::InvalidDimension(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(IsacError::Config(msg.into()))
}
