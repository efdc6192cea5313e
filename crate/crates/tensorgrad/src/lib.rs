//! Minimal dense-tensor engine: NCHW convolution, pooling, affine layers,
//! masked softmax losses, tape-based reverse-mode differentiation, SGD and
//! a finite-difference gradient checker.

mod error;
mod kernels;
mod param;
mod scalar;
mod tape;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use optim::Sgd;
pub use param::{ParamId, ParamSet, Parameter};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
