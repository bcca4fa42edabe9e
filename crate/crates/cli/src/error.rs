use cfgcd_consistency::ConsistencyError;
use cfgcd_metrics::MetricsError;
use cfgcd_nets::NetError;
use cfgcd_schedules::ScheduleError;
use cfgcd_teacher::TeacherError;
use cfgcd_toyworld::WorldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Checkpoint(String),
    /// A frozen component differs from the one a checkpoint was built with.
    #[error("{what} checksum mismatch: checkpoint has {expected}, found {found}")]
    Checksum { what: &'static str, expected: String, found: String },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Stable machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Checksum { .. } => "checksum",
            CliError::World(WorldError::PretrainFailed { .. }) => "pretrain",
            CliError::Consistency(
                ConsistencyError::GuidanceMismatch { .. } | ConsistencyError::GuidanceOutOfRange { .. },
            ) => "guidance",
            CliError::Consistency(ConsistencyError::UnfrozenEmbedder) => "frozen",
            CliError::World(_) | CliError::Schedule(_) | CliError::Net(_) => "model",
            CliError::Teacher(_) | CliError::Consistency(_) | CliError::Metrics(_) => "compute",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" => 2,
            "config" => 3,
            "io" => 4,
            "checkpoint" => 5,
            "checksum" => 6,
            "pretrain" => 7,
            "guidance" => 8,
            "frozen" => 9,
            _ => 10,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
