use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("stream underflow: payload exhausted")]
    StreamUnderflow,

    #[error("corrupt stream: {0}")]
    Corrupt(String),

    #[error("weights hash mismatch: expected {expected:016x}, found {found:016x}")]
    HashMismatch { expected: u64, found: u64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-parseable category name, used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Range(_) => "range",
            Error::Format(_) => "format",
            Error::Graph(_) => "graph",
            Error::Numeric(_) => "numeric",
            Error::Degenerate(_) => "degenerate",
            Error::StreamUnderflow => "underflow",
            Error::Corrupt(_) => "corrupt",
            Error::HashMismatch { .. } => "hash",
            Error::Invalid(_) => "usage",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code for the CLI; distinct per category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_) => 2,
            Error::Io(_) => 3,
            Error::Format(_) => 4,
            Error::Dimension(_) => 5,
            Error::Range(_) => 6,
            Error::Graph(_) => 7,
            Error::Numeric(_) => 8,
            Error::Degenerate(_) => 9,
            Error::StreamUnderflow => 10,
            Error::Corrupt(_) => 11,
            Error::HashMismatch { .. } => 12,
        }
    }
}
