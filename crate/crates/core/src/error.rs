//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("{op}: loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { op: &'static str, shape: Vec<usize> },

    #[error("graph order violated at record {record}: input {input} not before output {output}")]
    GraphOrder {
        record: usize,
        input: usize,
        output: usize,
    },

    #[error("missing gradient for parameter `{name}`")]
    MissingGrad { name: String },

    #[error("empty parameter selection (groups/kinds filter matched no leaves)")]
    EmptySelection,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("waveform too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("spectrogram geometry mismatch: {0}")]
    Geometry(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("model topology mismatch: {0}")]
    Topology(String),

    #[error("training diverged at {context}: loss is not finite")]
    Diverged { context: String },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
