//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Every kernel is generic over [`Real`], so the same tape runs on `f64`
//! for training and on [`Dual`] numbers when a Hessian-vector product is
//! needed. [`gradcheck`] holds the central-difference oracle used to verify
//! each registered primitive.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod real;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::{Dual, Real};
pub use tape::{Gradients, Resize, Tape, Var};
pub use tensor::Tensor;
