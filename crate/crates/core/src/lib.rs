//! Hybrid acoustic echo and noise reduction at 16 kHz.
//!
//! The processing chain is a frequency-domain partitioned-block Kalman
//! filter that removes the linearly coupled loudspeaker echo, followed by
//! a small causal neural post-filter that suppresses residual echo and
//! background noise via a complex spectral mask. Supporting modules cover
//! the streaming STFT frontend, power-law feature compression with
//! channel-wise subband reorientation, a cross-attention delay estimator,
//! a synthetic scene simulator, and objective metrics.
//!
//! Everything is deterministic: all randomness sits behind explicit 64-bit
//! seeds and all reductions accumulate in f64 in a fixed order, so a given
//! configuration and input reproduce bit-identical output.

pub mod features;
pub mod kalman;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scene;
pub mod stft;
pub mod tensor;
pub mod time_align;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration; the message names the field.
    #[error("configuration error: {0}")]
    Config(String),
    /// Tensor or frame dimensions do not match what the operation expects.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Input data rejected before processing (empty, too short, bad range).
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Weight container is malformed or does not match the model graph.
    #[error("weight store: {0}")]
    WeightStore(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
