use acv_ndops::NdError;
use thiserror::Error;

pub type Result<T, E = AcvError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AcvError {
    #[error(transparent)]
    Tensor(#[from] NdError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("unknown {kind} '{name}' (known: {known})")]
    Unknown { kind: &'static str, name: String, known: String },
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AcvError {
    pub fn config(detail: impl Into<String>) -> Self {
        AcvError::Config(detail.into())
    }

    pub fn format(format: &'static str, detail: impl Into<String>) -> Self {
        AcvError::Format { format, detail: detail.into() }
    }
}
