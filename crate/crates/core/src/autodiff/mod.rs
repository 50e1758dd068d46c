//! Tape-based reverse-mode differentiation over [`Tensor`](crate::Tensor)s.

mod check;
mod kernels;
mod tape;

pub use check::{grad_check, grad_check_many};
pub use tape::{Gradients, Tape, Var};
