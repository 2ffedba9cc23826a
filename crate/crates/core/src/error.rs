use alloc::string::String;

use crate::tensor::ValidationReport;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("invariant violated: {0}")]
    Invalid(ValidationReport),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("step {step} out of range 0..={max}")]
    StepOutOfRange { step: usize, max: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("frame too small: {height}x{width} for window {window}")]
    TooSmall {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("non-finite statistics")]
    NonFinite,
}

pub type Result<T> = core::result::Result<T, CoreError>;
