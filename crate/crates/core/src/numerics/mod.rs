//! Dense tensors, elementwise primitives and reverse-mode differentiation.

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

pub mod gradcheck;
pub mod init;
pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub(crate) use tensor::check_temperature as check_tau;
pub use tensor::{cosine_similarity, matmul, mean_over_axis, sigmoid, softmax_with_temperature, tanh, Tensor};
