//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records operations on [`Var`]s; [`grad`] (or
//! [`Tape::backward`]) returns d(scalar objective)/d(input) for any tracked
//! leaf. [`detach`] cuts a value out of the gradient flow.

mod conv;
mod ops;
mod tape;

pub use tape::{detach, grad, Gradients, Tape, Var};

pub(crate) use ops::sigmoid;
