//! Dense tensors, a reverse-mode tape, parameter storage, finite-difference
//! checking and the checkpoint container.

pub mod check;
pub mod checkpoint;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_with, relative_error, GradCheckReport, ParamCheck};
pub use params::{ParamId, ParamStore};
pub use scalar::{argmax, sigmoid, softmax, softmax_into, Scalar};
pub use tape::{mixture_into, Gradients, OpKind, Tape, Var, CE_FLOOR};
pub use tensor::Tensor;
