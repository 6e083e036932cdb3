use metacoop_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("parameter `{0}` is missing")]
    MissingParam(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown {kind} `{name}` (known: {known})")]
    Unknown {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error("task generation failed: {0}")]
    TaskGen(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: u64, detail: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("layouts differ: {0}")]
    LayoutMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
