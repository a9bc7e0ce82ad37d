use thiserror::Error;

/// Crate-wide error type. Variants map to the failure classes the public
/// operations are contracted to report.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent disagreement between operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An index (embedding id, class id, ...) outside its valid range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A caller-supplied value outside its documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An operation invoked in a state that does not permit it.
    #[error("invalid state: {0}")]
    State(String),

    /// A numeric procedure failed (factorization, non-finite input).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Configuration file rejected at load or validation time.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint archive malformed or version-incompatible.
    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
