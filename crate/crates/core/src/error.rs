use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid token set: {0}")]
    Partition(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("duplicate center token index {0}")]
    DuplicateCenter(usize),

    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),

    #[error("row v = {v} is above or at the vanishing point (c_y = {cy})")]
    AboveHorizon { v: f64, cy: f64 },

    #[error("function is not finite at coordinate {0}")]
    NonFinite(usize),

    #[error("malformed {kind} file: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
