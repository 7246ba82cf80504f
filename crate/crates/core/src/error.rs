use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {details}")]
    Dim { op: &'static str, details: String },

    #[error("{op} produced non-finite values")]
    NonFinite { op: &'static str },

    #[error("index {index} out of range (bound {bound}) in {what}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("tape already consumed by backward")]
    TapeConsumed,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient in parameter `{0}`")]
    BadGradient(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, details: impl Into<String>) -> Error {
        Error::Dim {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Error {
        Error::Contract(msg.into())
    }
}
