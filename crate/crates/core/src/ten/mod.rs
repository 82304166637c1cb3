//! Dense differentiable arrays, a reverse-mode tape, and a finite-difference
//! gradient verifier.

mod check;
mod matrix;
mod prob;
mod tape;

pub use check::{grad_check, grad_check_many, REL_OFFSET};
pub use matrix::{DiffArray, Matrix};
pub use prob::{cross_entropy, kl_divergence, l2_normalize, softmax, NORM_EPS};
pub use tape::{log_softmax_rows, softmax_rows, Gradients, Tape, Var, PROB_FLOOR};
