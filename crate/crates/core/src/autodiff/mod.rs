//! Reverse-mode automatic differentiation over the small set of operations
//! the forecaster needs.

pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use crate::dist::logsumexp;
pub use params::{ParamId, ParamRegistry};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
