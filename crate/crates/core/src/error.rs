use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("attention stage error: expected {expected}, got {got}")]
    Stage {
        expected: &'static str,
        got: &'static str,
    },

    #[error("backward already ran on this tape")]
    TapeConsumed,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("non-finite loss {value} at step {step} (batch {batch_ids:?})")]
    NonFiniteLoss {
        step: u64,
        value: f64,
        batch_ids: Vec<String>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
