use std::fmt;

/// Errors produced anywhere in the crate.
#[derive(Debug)]
pub enum SeerError {
    /// Operand shapes do not line up for an operation.
    Shape { op: &'static str, detail: String },
    /// A documented precondition was violated by the caller.
    Contract(String),
    /// Invalid hyperparameter or configuration value.
    Config(String),
    /// A token id is outside the configured vocabulary.
    OutOfVocab {
        item: String,
        position: usize,
        token: u32,
        vocab_size: u32,
    },
    /// A requested record does not exist.
    NotFound(String),
    /// A data file could not be parsed at the given 1-based line.
    Parse { line: usize, message: String },
    /// A numeric quantity became NaN or infinite.
    NonFinite(String),
    Io(std::io::Error),
}

impl fmt::Display for SeerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Self::Contract(msg) => write!(f, "contract violation: {msg}"),
            Self::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Self::OutOfVocab {
                item,
                position,
                token,
                vocab_size,
            } => write!(
                f,
                "item {item}: token id {token} at position {position} is outside the vocabulary (size {vocab_size})"
            ),
            Self::NotFound(what) => write!(f, "not found: {what}"),
            Self::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Self::NonFinite(loc) => write!(f, "non-finite value at {loc}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for SeerError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for SeerError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, SeerError>;
