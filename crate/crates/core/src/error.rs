use attrikit_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = AttrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AttrError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("non-finite loss or gradient at training step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite velocity at sampling step {step}")]
    NonFiniteTrajectory { step: usize },

    #[error("embeddings span fewer than two dimensions (variances {variances:?})")]
    DegenerateRank { variances: [f64; 2], layout: Vec<f64> },

    #[error("retrieval index has no entries for {0}")]
    EmptyIndex(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
