use ripbench::checkpoint::CheckpointError;
use ripbench::classical::ClassicalError;
use ripbench::data::DataError;
use ripbench::tensor::TensorError;
use ripbench::train::TrainError;
use thiserror::Error;

/// Command failure, carrying the process exit code contract:
/// 2 usage/config, 3 data/compatibility, 4 numeric failure.
#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    pub fn usage(msg: impl std::fmt::Display) -> Self {
        Failure::Usage(msg.to_string())
    }

    pub fn data(msg: impl std::fmt::Display) -> Self {
        Failure::Data(msg.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Failure>;

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Failure::Numeric(e.to_string()),
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<ClassicalError> for Failure {
    fn from(e: ClassicalError) -> Self {
        Failure::Data(format!("svm: {e}"))
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

/// Output-side I/O problems are the caller's to fix (bad path, permissions).
pub fn write_failed(path: &std::path::Path, e: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("cannot write {}: {e}", path.display()))
}
