use std::fmt;
use std::io;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor dimension mismatch; carries a description naming both shapes.
    Shape(String),
    /// Invalid configuration value or key.
    Config(String),
    /// Invalid runtime input (out-of-vocabulary id, empty sequence, ...).
    Input(String),
    /// Non-finite value produced where a finite one is required.
    Numeric(String),
    /// Malformed checkpoint or data file; offset is the byte position.
    Format { offset: u64, msg: String },
    /// Fusing a layer would remove every row or every column.
    Degenerate { layer: String },
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Format { offset, msg } => write!(f, "format error at offset {offset}: {msg}"),
            Error::Degenerate { layer } => {
                write!(f, "degenerate layer {layer}: all rows or all columns pruned")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
