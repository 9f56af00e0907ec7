//! Dense tensors, a define-by-run tape with reverse-mode differentiation,
//! and the layers built on top of it (affine maps, MLPs, multi-head
//! dot-product attention) plus an adaptive-moment optimizer.

mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use layers::{mhdpa, Activation, AttentionGroups, Linear, MhdpaLayer, Mlp, MlpSpec};
pub use optim::{Adam, AdamConfig};
pub use params::{init_rng, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have unequal lengths")]
    Ragged,
    #[error("invalid configuration: {0}")]
    Configuration(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
}

impl TensorError {
    pub(crate) fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Self {
        TensorError::DimensionMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }
    }
}
