//! Dense `f64` linear algebra and reverse-mode differentiation.

pub mod counter;
mod matrix;
mod tape;

pub use matrix::{argmax, Matrix};
pub use tape::{Gradients, Tape, Var};
