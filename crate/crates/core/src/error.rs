use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// The caller passed data that violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),
    /// A numeric computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An operation was called in a state that does not allow it.
    #[error("invalid state: {0}")]
    State(String),
    /// A serialized artifact is malformed.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! input_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Input(format!($($arg)*))
    };
}

macro_rules! format_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Format(format!($($arg)*))
    };
}

pub(crate) use format_err;
pub(crate) use input_err;
