//! Differentiable operations, implemented as methods on [`Var`](crate::autograd::Var).

pub(crate) mod conv;
pub(crate) mod elementwise;
pub(crate) mod loss;
pub(crate) mod norm;
pub mod resample;

pub use resample::{resize, Interpolation, ResizeSpec};
