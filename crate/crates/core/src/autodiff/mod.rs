//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive applications in execution order; calling
//! [`Tape::backward`] on a scalar node walks the records in reverse and
//! returns a gradient for every node that depends on a tracked leaf.

mod kernels;
mod optim;
mod tape;
mod tensor;

pub use kernels::{ConvGeometry, PoolGeometry};
pub use optim::{sgd_momentum_step, MomentumState};
pub use tape::{softmax_rows, Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
