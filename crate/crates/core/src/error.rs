use crate::classifier::ClassifierParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A vector whose norm is at or below the degeneracy floor.
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("range error: {0}")]
    Range(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("empty universe: {0}")]
    EmptyUniverse(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training produced a non-finite loss. `last_good` holds the parameters
    /// at the start of the failing epoch.
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged {
        epoch: usize,
        last_good: Box<ClassifierParams>,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
