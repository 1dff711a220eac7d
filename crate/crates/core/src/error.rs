//! Error type shared by all core modules.

use thiserror::Error;

/// Errors raised by sequence construction, model evaluation, and losses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("empty annotation set: {0}")]
    EmptyAnnotations(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no valid alignment: {0}")]
    Infeasible(String),

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("stale gradient tape: {0}")]
    StaleTape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
