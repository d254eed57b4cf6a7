//! Dense float64 tensors with tape-based reverse-mode differentiation.
//!
//! Every op appends a node to a [`Tape`]; [`Tape::backward`] walks the tape in
//! reverse and accumulates vector-Jacobian products into leaf gradients.
//! Model code usually works through a [`Graph`], which binds a [`ParamStore`]
//! to a tape so parameters are looked up by name.

mod backward;
mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with};
pub use params::{Graph, ParamStore};
pub use tape::{Mode, Tape, Var};
pub use tensor::Tensor;
