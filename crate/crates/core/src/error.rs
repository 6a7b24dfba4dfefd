use thiserror::Error;

/// Errors raised across the engine.
#[derive(Debug, Error)]
pub enum BeragError {
    /// Caller violated an input contract (empty input, shape mismatch, bad token id, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Every entry of a would-be distribution is `-inf`.
    #[error("degenerate distribution: all {0} entries are -inf")]
    Degenerate(usize),

    /// A non-finite value appeared while evaluating or differentiating a loss program.
    #[error("non-finite value at node {node} ({op})")]
    Numeric { node: usize, op: &'static str },

    /// Concatenated context does not fit the configured window.
    #[error("out of context length: {needed} tokens exceed limit {limit}")]
    OutOfLength { needed: usize, limit: usize },

    /// Loss became non-finite during optimisation.
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// Failure while processing one dataset item.
    #[error("item {id}: {source}")]
    Item {
        id: String,
        #[source]
        source: Box<BeragError>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = BeragError> = std::result::Result<T, E>;

pub(crate) fn usage(msg: impl Into<String>) -> BeragError {
    BeragError::Usage(msg.into())
}
