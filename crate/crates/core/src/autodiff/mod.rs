//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Operations are recorded eagerly on a [`Tape`]; [`Tape::backward`] then
//! sweeps the records in reverse to produce adjoints for every node. The
//! primitive set is exactly what the networks and losses need: matrix
//! products, elementwise arithmetic, rectifiers, batch normalization,
//! reductions, per-row 3×3 rotation exponentials, the masked pseudo-Huber
//! reduction and visible-point centering.

mod tape;
mod tensor;

pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::pseudo_huber_sq;
