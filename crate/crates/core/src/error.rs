//! Error type shared across the crate.

use std::fmt;
use std::io;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor math, stashing, and model parsing.
#[derive(Debug)]
pub enum Error {
    /// A precondition on an operation's inputs was violated.
    InvalidInput(String),
    /// A stashed payload failed a consistency check on restore.
    CorruptStash(String),
    /// The store-once/restore-once stash discipline was broken.
    ProtocolViolation(String),
    /// A model-spec document could not be parsed or validated.
    ModelParse {
        /// Index of the offending layer, when attributable.
        layer: Option<usize>,
        message: String,
    },
    /// Underlying I/O failure.
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Self::CorruptStash(msg) => write!(f, "corrupt stash: {msg}"),
            Self::ProtocolViolation(msg) => write!(f, "stash protocol violation: {msg}"),
            Self::ModelParse { layer: Some(i), message } => {
                write!(f, "model spec error at layer {i}: {message}")
            }
            Self::ModelParse { layer: None, message } => {
                write!(f, "model spec error: {message}")
            }
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}
