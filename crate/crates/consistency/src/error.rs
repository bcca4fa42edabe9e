use cfgcd_autodiff::AutodiffError;
use cfgcd_nets::NetError;
use cfgcd_schedules::ScheduleError;
use cfgcd_teacher::TeacherError;
use cfgcd_toyworld::WorldError;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConsistencyError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("guidance mismatch: student was distilled at w={trained}, asked for w={requested}")]
    GuidanceMismatch { trained: f64, requested: f64 },
    #[error("guidance strength {w} lies outside the supported range [{lo}, {hi}]")]
    GuidanceOutOfRange { w: f64, lo: f64, hi: f64 },
    #[error("step index {n} outside 1..={steps}")]
    StepOutOfRange { n: usize, steps: usize },
    #[error("the embedder must be frozen before it can score a student")]
    UnfrozenEmbedder,
    #[error("invalid distillation configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, ConsistencyError>;
