//! Reverse-mode differentiation over dense `f64` tensors and the Adam rule.

mod adam;
mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, MAX_COORDS_PER_BLOCK};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
