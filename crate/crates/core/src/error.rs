//! Error types shared across the engine.

use thiserror::Error;

/// Errors produced by cache management, attention, beam search, and the
/// scheduler. Configuration problems are reported before any work starts.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation arrived out of order, e.g. appending decode step `got`
    /// when the cache expected `expected`.
    #[error("sequencing error: expected step {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("reorder plan error: {0}")]
    Plan(String),

    #[error("input error: {0}")]
    Input(String),

    /// A prefix that should be reachable in the item trie is not. Under
    /// masked selection this indicates a bug: masking guarantees every
    /// surviving beam extends to at least one valid item.
    #[error("dead prefix: {0:?} has no continuation in the vocabulary")]
    DeadPrefix(Vec<u32>),

    /// A beam has no selectable candidate after masking.
    #[error("dead beam: no valid candidate for beam {0}")]
    DeadBeam(u32),

    /// Merging two empty attention partials: no key was visible at all.
    #[error("undefined attention: both partials are empty")]
    UndefinedAttention,

    #[error("planner training error: {0}")]
    Training(String),

    #[error("block pool exhausted: requested {requested} blocks, {available} free")]
    PoolExhausted { requested: usize, available: usize },

    /// The admission queue is full; the request was rejected, not dropped.
    #[error("backpressure: queue bound {bound} reached")]
    Backpressure { bound: usize },

    #[error("engine state error: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
