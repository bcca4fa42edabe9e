use cfgcd_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("w was supplied but this network has no w-embedding branch")]
    UnexpectedW,
    #[error("this network has a w-embedding branch and needs w")]
    MissingW,
    #[error("condition id {id} out of range for {classes} classes")]
    ConditionOutOfRange { id: usize, classes: usize },
    #[error("batch mismatch: {what} has {got} entries, expected {expected}")]
    BatchMismatch { what: &'static str, got: usize, expected: usize },
    #[error("latent has {got} columns, network expects {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ShapeDrift { name: String, got: [usize; 2], expected: [usize; 2] },
    #[error("incompatible networks: {0}")]
    Incompatible(String),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, NetError>;
