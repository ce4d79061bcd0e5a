//! Dense tensors, the forward kernels the model is built from, a small
//! reverse-mode tape over those kernels, Adam and a finite-difference
//! gradient checker.

mod adam;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{check_gradients, check_gradients_with, GradEntry, GradReport};
pub use kernels::{
    cross_entropy, linear_forward, masked_cross_entropy, matmul, matmul_t, relu, rms_norm,
    softmax_in_place, softmax_rows, softplus, RMS_EPS,
};
pub use tape::{Gradients, Tape, Var};
pub(crate) use kernels::relu_in_place;
pub use tensor::{Scalar, Tensor};
