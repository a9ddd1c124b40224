use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("arity error: {0}")]
    Arity(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("weight file rejected: {0}")]
    WeightFormat(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
