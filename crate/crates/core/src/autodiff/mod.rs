//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Parameter`] is a shared handle: inserting the same handle into a
//! [`Graph`] from several call sites makes those sites share weights, and
//! [`Graph::backward`] accumulates the sum of the per-site gradients into it.

mod checkpoint;
mod graph;
mod optim;
mod param;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{AttentionLayout, AttentionSegment, Graph, NodeId};
pub use optim::{Adam, AdamConfig, NoamSchedule};
pub use param::Parameter;
pub use tensor::Tensor;
pub(crate) use tensor::{gemm, View, ViewMut};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have unequal lengths")]
    Ragged,
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite value in forward result")]
    NonFinite { op: &'static str },
    #[error("no attendable position")]
    NoAttendablePosition,
    #[error("cross entropy: every position is ignored")]
    AllIgnored,
    #[error("{op}: index {index} out of range {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("stale gradients: {0}")]
    StaleGradients(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
