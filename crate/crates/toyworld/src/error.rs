use cfgcd_autodiff::AutodiffError;
use cfgcd_nets::NetError;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid world configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),
    #[error("could not place {classes} class centers at separation {separation} after {attempts} draws")]
    Separation { classes: usize, separation: f64, attempts: usize },
    #[error("class {class} is a mixture of {components} components; the analytic oracle needs a single Gaussian")]
    NotGaussian { class: usize, components: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("embedder pretraining failed: held-out retrieval accuracy {accuracy:.3} is not above {threshold}")]
    PretrainFailed { accuracy: f64, threshold: f64 },
    #[error("dimension mismatch: {0}")]
    Dim(String),
}

pub type Result<T> = std::result::Result<T, WorldError>;
