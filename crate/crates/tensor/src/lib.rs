//! Dense row-major tensors with a reverse-mode differentiation tape.
//!
//! The tape records only operations whose inputs participate in
//! differentiation; everything else is evaluated eagerly and kept as a
//! constant node. Two element types are supported through [`Real`]:
//! `f64` for gradient verification and `f32` for end-to-end runs.

mod blur;
mod error;
mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use blur::{blur_2d, blur_2d_adjoint, gaussian_kernel};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use real::{DType, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
