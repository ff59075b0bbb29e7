//! Dense tensor storage and hand-derived forward/backward kernels.
//!
//! Every kernel is a pure function of its operands. Training runs in `f32`;
//! the same kernels instantiated at `f64` back the finite-difference checks.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod gradcheck;
mod loss;
mod tensor;

pub use activation::{relu_backward, relu_forward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, BatchNormCache, BnMode, BN_EPSILON, BN_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_size};
pub use dense::{dense_backward, dense_forward};
pub use gradcheck::{finite_difference_gradient, max_relative_error, relative_error};
pub use loss::softmax_cross_entropy;
pub use tensor::{LayerGrad, Scalar, Tensor};
