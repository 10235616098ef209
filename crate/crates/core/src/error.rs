use thiserror::Error;

/// Errors raised by model construction, solvers, and data handling.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("edge bonus at position {index} is negative ({value})")]
    NegativeEdge { index: usize, value: f64 },

    #[error("non-finite value in {field}")]
    NonFinite { field: &'static str },

    #[error("budget {budget} exceeds sequence length {len}")]
    BudgetTooLarge { budget: usize, len: usize },

    #[error("budget fraction {0} is outside (0, 1]")]
    BadFraction(f64),

    #[error("instance of length {len} exceeds the enumeration limit of {limit}")]
    TooLarge { len: usize, limit: usize },

    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    #[error("entity spans {e1} and {e2} overlap")]
    OverlappingSpans { e1: String, e2: String },

    #[error("span {span} is out of bounds for length {len}")]
    SpanOutOfBounds { span: String, len: usize },

    #[error("instance {index} has no label")]
    Unlabeled { index: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: {source}")]
    AtLine { line: usize, source: Box<Error> },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Whether the error comes from the data rather than the environment.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
