use thiserror::Error;

/// Errors produced by the diffusion library.
#[derive(Debug, Error)]
pub enum RaddError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate context: the conditioning event has probability zero")]
    DegenerateContext,

    #[error("invalid transition: {0}")]
    InvalidTransition(String),

    #[error("non-finite value at parameter {index}: {what}")]
    NonFinite { index: usize, what: String },

    #[error(
        "infinite loss: model assigns zero probability to token {token} at position {position}"
    )]
    InfiniteLoss { position: usize, token: usize },

    #[error(
        "training diverged at step {step}: loss {loss} stayed above 10x the initial loss {initial}"
    )]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
    },

    #[error("instance too large to enumerate: {0}")]
    TooLarge(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RaddError {
    /// True for failures caused by numerics (as opposed to bad input or IO).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            RaddError::NonFinite { .. }
                | RaddError::InfiniteLoss { .. }
                | RaddError::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, RaddError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(RaddError::Domain(msg.into()))
}
