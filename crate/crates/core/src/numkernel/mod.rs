//! Dense numeric primitives with analytic gradients, plus a
//! finite-difference oracle for checking them.

pub mod gradcheck;
pub mod ops;
mod tensor;

pub use gradcheck::{finite_diff_check, FnObjective, GradCheckReport, Objective};
pub use ops::{
    conv2d_valid, layer_norm, matmul, maxpool2, relu, sigmoid, softmax, softmax_tensor,
    LAYER_NORM_EPS,
};
pub use tensor::Tensor;
