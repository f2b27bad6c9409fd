//! Small reverse-mode differentiation engine over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and
//! whatever it needs for the backward pass. Build a fresh graph per step.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{cosine_lr, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, GradReport};
pub use graph::{AllowedKeys, Graph, Var, MASK_NEG};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must be 1x1, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("class index {target} out of range for {classes} classes")]
    InvalidTarget { target: usize, classes: usize },
    #[error("attention mask covers {got} queries, expected {expected}")]
    MaskSize { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
