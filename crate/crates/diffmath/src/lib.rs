//! Reverse-mode differentiation over dense `f64` matrices, feed-forward
//! networks, Adam, and a binary checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod error;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState, StepOutcome};
pub use error::{DiffError, Result};
pub use nn::{Activation, Mlp, ParamSet};
pub use tape::{sphere_normalize_rows, Gradients, Tape, Var};
pub use tensor::Tensor;
