use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("view has no visible keypoints")]
    NoVisiblePoints,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate structure: singular value ratio {ratio:.3e} below {threshold:.1e}")]
    DegenerateStructure { ratio: f64, threshold: f64 },

    #[error("metric upgrade failed: Gram matrix is not positive definite")]
    MetricUpgrade,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("all {0} restarts diverged")]
    AllRestartsDiverged(usize),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("missing ground truth: {0}")]
    MissingGroundTruth(&'static str),

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
