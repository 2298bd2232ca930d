use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{trainer} diverged at step {step}: loss is {loss}")]
    NonFiniteLoss {
        trainer: &'static str,
        step: usize,
        loss: f64,
    },
    #[error("no preference pairs available for {0}")]
    EmptyPairs(&'static str),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl SimError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    /// Whether the error stems from user configuration rather than execution.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_) | Self::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, SimError>;
