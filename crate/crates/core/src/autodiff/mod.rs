//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the record in reverse and returns gradients for every node. Leaves
//! are either trainable weights, differentiable inputs (such as treatment
//! trajectories) or constants; the first two receive gradients.

mod adamw;
mod tape;
mod tensor;

pub use adamw::{adamw_step, AdamState, AdamW, AdamWConfig};
pub use tape::{Gradients, LeafKind, Tape, Var};
pub use tensor::Tensor;
