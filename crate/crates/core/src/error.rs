use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    InvalidValue(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocabulary { token: u32, vocab: usize },

    #[error("position {position} outside pool of size {pool}")]
    PositionOutOfRange { position: usize, pool: usize },

    #[error("positions must be strictly increasing (slot {slot})")]
    PositionsNotIncreasing { slot: usize },

    #[error("capacity exceeded: {len} tokens, capacity {capacity}")]
    CapacityExceeded { len: usize, capacity: usize },

    #[error("invalid slot {slot} for document of length {len}")]
    InvalidSlot { slot: usize, len: usize },

    #[error("empty document")]
    EmptyDocument,

    #[error("delta set inconsistent with compressed tensors: {0}")]
    InconsistentDelta(String),

    #[error("malformed stream: {0}")]
    Stream(String),

    #[error("invariant `{name}` violated: {detail}")]
    Invariant { name: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
