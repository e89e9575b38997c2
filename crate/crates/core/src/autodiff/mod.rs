//! Dense tensors, reverse-mode differentiation and gradient verification.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_subset, GradCheckReport, ParamCheck};
pub use tape::{attention_weights, Gradients, Tape, Var, LEAKY_SLOPE};
pub use tensor::{Real, Tensor};
