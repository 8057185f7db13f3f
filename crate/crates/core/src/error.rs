use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid arm model: {0}")]
    InvalidArm(String),

    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("cannot sample a point cloud from an environment without obstacles")]
    EmptyCloud,

    #[error("generation failed after {attempts} attempts: {what}")]
    Generation { what: String, attempts: usize },

    #[error("observation variant does not match the network variant")]
    VariantMismatch,

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid planning problem: {0}")]
    InvalidProblem(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        report: Box<crate::cbf::TrainReport>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
