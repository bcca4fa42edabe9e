use cfgcd_autodiff::AutodiffError;
use cfgcd_nets::NetError;
use cfgcd_schedules::ScheduleError;
use cfgcd_toyworld::WorldError;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TeacherError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("row {row}: a solver step must move to lower noise, got {from} -> {to}")]
    InvalidStep { row: usize, from: f64, to: f64 },
    #[error("guidance strength must be finite and non-negative, got {0}")]
    NegativeGuidance(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("the training set is empty")]
    EmptyDataset,
    #[error("invalid teacher configuration: {0}")]
    InvalidConfig(String),
    #[error("query accounting drifted: counted {counted}, expected {expected}")]
    QueryMismatch { counted: u64, expected: u64 },
}

pub type Result<T> = std::result::Result<T, TeacherError>;
