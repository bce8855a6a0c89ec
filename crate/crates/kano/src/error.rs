//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KanoError {
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },
    #[error("shape mismatch in {ctx}: {detail}")]
    Shape { ctx: &'static str, detail: String },
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl KanoError {
    pub fn shape(ctx: &'static str, detail: impl Into<String>) -> Self {
        KanoError::Shape {
            ctx,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, KanoError>;
