use thiserror::Error;

pub type Result<T, E = NdError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NdError {
    #[error("{op}: dimension error: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: numeric precondition violated: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("usage error: {0}")]
    Usage(String),
}

impl NdError {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        NdError::Dimension { op, detail: detail.into() }
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        NdError::Numeric { op, detail: detail.into() }
    }
}
