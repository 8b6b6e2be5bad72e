use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("operation would produce an empty output: {0}")]
    EmptyOutput(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(alloc::vec::Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("window out of bounds: {0}")]
    OutOfBounds(String),
    #[error("operation requires the {expected} variant, model is {found}")]
    VariantMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("label set contains a single class")]
    SingleClass,
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
}
