//! Dense matrices, activations, reverse-mode gradients and the
//! finite-difference oracle used to check them.

mod finite_diff;
mod matrix;
mod tape;

pub use finite_diff::{finite_diff_grad, max_relative_error, DEFAULT_STEP};
pub use matrix::{dot, leaky_relu, sigmoid, Matrix};
pub use tape::{Gradients, Tape, Var};

/// Default negative slope of every leaky ReLU in the network.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
