use cfgcd_autodiff::AutodiffError;
use cfgcd_toyworld::WorldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{what}: need at least {needed} samples, got {got}")]
    TooFewSamples { what: &'static str, needed: usize, got: usize },
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;
