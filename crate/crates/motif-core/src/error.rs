//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed WAV file: {0}")]
    WavFormat(String),

    #[error("unsupported WAV encoding: {0}")]
    WavUnsupported(String),

    #[error("input too short: need at least {needed} samples, got {got}")]
    InsufficientInput { needed: usize, got: usize },

    #[error("pitch shift of {0} semitones is outside [-3, 3]")]
    PitchShiftRange(i32),

    #[error("instance center {center:.4} s lies outside the clip [0, {clip_len:.4})")]
    OutOfClip { center: f64, clip_len: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("cannot form {k} clusters from {distinct} distinct widths")]
    DegenerateClusters { k: usize, distinct: usize },

    #[error("annotation error at line {line}: {msg}")]
    Annotation { line: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint incompatible with current config: {0}")]
    Incompatible(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite loss in batch {batch}: {detail}")]
    NanLoss { batch: usize, detail: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
