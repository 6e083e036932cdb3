use metacoop_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("run diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: u64, detail: String },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Divergence { iteration, detail } => HarnessError::Divergence { iteration, detail },
            CoreError::InvalidConfig(msg) | CoreError::InvalidSpec(msg) => HarnessError::Config(msg),
            CoreError::Unknown { .. } => HarnessError::Config(e.to_string()),
            other => HarnessError::Core(other),
        }
    }
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Divergence { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
