use thiserror::Error;

use reid_core::ReidError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ReidError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{failed} of {total} sweep runs failed")]
    SweepFailed { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 0 ok, 1 runtime failure, 2 input/validation, 3 dimension/format, 4 empty result.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => e.exit_code(),
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) | CliError::SweepFailed { .. } => 1,
        }
    }
}
