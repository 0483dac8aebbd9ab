//! Minimal reverse-mode differentiation substrate.
//!
//! Exactly the primitive set the network needs: dense linear algebra,
//! shape movement, activations, the two normalizations, 3-D convolution
//! and its transpose, and token/grid layout changes. Forward values and
//! gradients are bitwise deterministic given the same inputs.

mod conv;
pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use scalar::Scalar;
pub use tape::{Tape, TensorRef, GELU_C0, GELU_C1, NORM_EPS};
pub use tensor::Tensor;
