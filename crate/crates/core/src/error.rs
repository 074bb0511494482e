use thiserror::Error;

/// Errors produced anywhere in the inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("value error: {0}")]
    Value(String),
    #[error("duplicate entry: {0}")]
    Duplicate(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("validity error: {0}")]
    Validity(String),
    #[error("index out of bounds: {0}")]
    Bounds(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("undefined quantity: {0}")]
    Undefined(String),
    #[error("numerical failure: {message}")]
    Numerical {
        message: String,
        /// JSON dump of the offending state, when one is available.
        dump: Option<String>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical {
            message: message.into(),
            dump: None,
        }
    }
}
