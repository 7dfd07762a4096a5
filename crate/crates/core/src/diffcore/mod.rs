//! Differentiable numerical substrate: arrays, a recording tape with
//! reverse-mode gradients, parameter stores and a finite-difference oracle.

mod array;
mod gradcheck;
pub mod kernels;
mod params;
mod scalar;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_diff_check, param_finite_diff_check};
pub use params::{GradMap, Graph, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{Grads, Tape, Var};

/// Layer-norm epsilon used throughout the stack.
pub const LN_EPS: f64 = 1e-5;
