//! Multilayer perceptrons on top of [`crate::autodiff`], with masking,
//! spectral normalization, Adam and a binary checkpoint format.

mod adam;
pub mod checkpoint;
mod mlp;
pub mod spectral;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::ModelFile;
pub use mlp::{mlp_forward, Activation, BoundMlp, Linear, Mlp};
pub use spectral::spectral_normalize;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("network has no layers")]
    EmptyNetwork,
    #[error("spectral normalization needs at least one power iteration")]
    ZeroPowerIterations,
    #[error("expected {expected} parameter tensors, got {got}")]
    ParamCountMismatch { expected: usize, got: usize },
    #[error("parameter {index}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-finite gradient {value} in parameter {param} at flat index {index}")]
    NonFiniteGradient { param: usize, index: usize, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
