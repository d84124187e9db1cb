//! Dense tensors, parameter storage, pointwise layers and normalizations,
//! each paired with its hand-written backward pass.

pub(crate) mod gemm;
pub mod gradcheck;
pub mod norm;
pub mod ops;
pub mod params;
pub mod tensor;

pub use gradcheck::{check_scalar, check_scalar_kink_aware, grad_check, Differentiable, FnOp, GradCheckReport};
pub use norm::{
    cumulative_layer_norm, cumulative_layer_norm_backward, global_layer_norm, global_layer_norm_backward, ClnCache,
    GlnCache, NORM_EPS,
};
pub use ops::{channel_linear, channel_linear_backward, prelu, prelu_backward, relu, relu_backward};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;
