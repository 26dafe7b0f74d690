//! Library error type.

/// Errors surfaced by the library. Sampler-internal impossibilities (weight zero
/// hypotheses) are represented as `-inf` log-weights, not errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("degenerate mixture: no component has positive weight")]
    DegenerateMixture,
    #[error("invalid threshold {0}: must lie in [0, 1)")]
    InvalidThreshold(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("matrix not positive definite in {0}")]
    NotPositiveDefinite(&'static str),
    #[error("invalid association: {0}")]
    InvalidAssociation(String),
    #[error("empty sample store")]
    EmptyStore,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("linear program failed: {0}")]
    LinearProgram(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
