use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: [usize; 2], rhs: [usize; 2] },
    #[error("{op}: {detail}")]
    InvalidInput { op: &'static str, detail: String },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    BadLength { shape: [usize; 2], len: usize },
    #[error("tensor shape {shape:?} has a zero dimension")]
    EmptyShape { shape: [usize; 2] },
    #[error("rows of unequal length")]
    RaggedRows,
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: [usize; 2] },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: [usize; 2] },
    #[error("backward already ran on this tape; reset it before recording again")]
    BackwardAlreadyRun,
    #[error("the tape is empty")]
    EmptyTape,
    #[error("variable does not belong to this tape")]
    ForeignVar,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
