use thiserror::Error;

/// Errors raised by the layer machinery.
#[derive(Debug, Error)]
pub enum DstcError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DstcError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(DstcError::Shape(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(DstcError::Config(msg.into()))
}
