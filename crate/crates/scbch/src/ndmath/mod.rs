//! Dense matrix arithmetic and reverse-mode differentiation.

mod matrix;
mod tape;

pub use matrix::{cosine, dot, Matrix};
pub use tape::{Gradients, Tape, Var};
