//! Dense tensors, the 1×1 convolution, softmax, SGD with momentum, and a
//! central-difference gradient checker.

mod gradcheck;
mod io;
mod matrix;
mod ops;
mod optim;
mod tensor;

pub use gradcheck::{check_gradient, finite_difference_check, GradCheckReport, Tolerance};
pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor, MAGIC};
pub use ops::{conv1x1, conv1x1_backward, conv1x1_backward_params, gemm, softmax, softmax_backward};
pub use matrix::{Axis, Matrix};
pub use optim::sgd_momentum_step;
pub use tensor::{ParamTensor, Tensor};
