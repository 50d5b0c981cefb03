use thiserror::Error;

/// Error categories surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("load error: {0}")]
    Load(String),

    #[error("retrieval error: {0}")]
    Retrieval(String),

    #[error("sequence length error: {0}")]
    Length(String),

    #[error("mask error: {0}")]
    Mask(String),

    #[error("checkpoint corruption: {0}")]
    Corruption(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
