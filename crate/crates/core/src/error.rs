use alloc::string::String;

/// Errors raised by the detection core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid box for object {index}: {reason}")]
    InvalidBox { index: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("duplicate id {0}")]
    Duplicate(u64),
    #[error("class sets differ")]
    ClassMismatch,
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
