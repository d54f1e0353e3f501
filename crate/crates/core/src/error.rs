use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("unsatisfiable task constraints: {0}")]
    Unsatisfiable(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("pretraining sanity gate failed: pretext Dice {dice:.4} <= {gate}")]
    PretrainGate { dice: f64, gate: f64 },
    #[error("corrupt container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
