use thiserror::Error;

/// Errors raised anywhere in the training stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A gradient carried a timestamp newer than the server's weights.
    #[error("clock violation: gradient timestamp {gradient} is ahead of server timestamp {server}")]
    ClockViolation { gradient: u64, server: u64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    /// Training produced a non-finite parameter; the run must abort.
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::Parse {
            line,
            message: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
