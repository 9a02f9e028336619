use thiserror::Error;

/// Errors produced by the tensor and DMRG machinery.
#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched indices, charge lengths, arities or mode specifications.
    #[error("structural error: {0}")]
    Structural(String),
    /// A caller-supplied value is outside the accepted domain.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A dense materialization or basis would exceed its size limit.
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    /// Truncation discarded every singular value.
    #[error("degenerate truncation: all singular values were discarded")]
    DegenerateTruncation,
    #[error("malformed snapshot: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn structural(msg: impl Into<String>) -> Error {
    Error::Structural(msg.into())
}

pub(crate) fn argument(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
