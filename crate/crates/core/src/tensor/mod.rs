//! Dense `f64` tensors with tape-based reverse-mode differentiation.

pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod value;

pub use gradcheck::{grad_check, grad_check_with};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, OpKind, Tape, Var, LAYER_NORM_EPS};
pub(crate) use tape::log_softmax_in_place;
pub use value::Tensor;

#[cfg(test)]
mod tests;
