use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("non-positive weight at dataset indices {indices:?}")]
    NonPositiveWeights { indices: Vec<usize> },

    #[error("division guard: alpha_{k} = {alpha:e} is below 1e-8")]
    AlphaTooSmall { k: usize, alpha: f64 },

    #[error("schedule inconsistency at step {k}: s^2 = {s2:e}")]
    ScheduleInconsistent { k: usize, s2: f64 },

    #[error("loss became non-finite at step {step} (batch {batch_hash})")]
    TrainingDiverged { step: usize, batch_hash: String },

    #[error("non-finite guidance gradient at step {k} (w_hat = {w_hat})")]
    NonFiniteGuidance { k: usize, w_hat: f64 },

    #[error("chain {chain} diverged at step {k}")]
    ChainDiverged { chain: usize, k: usize },

    #[error("conditioning mismatch: {0}")]
    Conditioning(String),

    #[error("grid oracle did not converge: {0}")]
    GridTooCoarse(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Shape {
        op: op.into(),
        detail: detail.into(),
    }
}
