//! A small reverse-mode automatic differentiation substrate.
//!
//! Values live in [`Tensor`]s; computations are recorded on a [`Tape`] whose
//! node order is already a topological order, so the backward pass is a single
//! reverse sweep. Everything is generic over [`Scalar`] (`f32` for training,
//! `f64` for finite-difference verification).

mod error;
mod gemm;
pub mod gradcheck;
mod kernels;
pub mod optim;
mod param;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, op_suite, probe_sum, GradCheckConfig, GradCheckReport};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use param::Parameter;
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tape::{Grads, Reduction, Tape, Var};
pub use tensor::Tensor;
