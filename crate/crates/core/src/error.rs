use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure after escalating jitter to {jitter:e}: {reason}")]
    NumericalFailure { jitter: f64, reason: String },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("undefined result: {0}")]
    UndefinedResult(String),

    #[error("estimation failure: {0}")]
    EstimationFailure(String),

    #[error("generation failure: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: msg.into(),
    }
}
