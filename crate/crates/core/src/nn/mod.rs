//! Minimal differentiable kernels for training the detector from scratch.

mod gradcheck;
mod ops;
mod optim;
mod tensor;

pub use gradcheck::{dot, grad_check, probe_like, relative_error, GradCheckReport, FD_STEP, RELATIVE_FLOOR};
pub use ops::{
    activation_backward, apply_activation, avgpool2x2, avgpool2x2_backward, avgpool_global,
    avgpool_global_backward, bce_with_logits, conv2d, conv2d_backward, gelu, linear, linear_backward, linear_map,
    linear_map_backward, sigmoid, Activation, Conv2dGrads, ConvGeometry, LinearGrads,
};
pub use optim::{adamw_step, AdamWConfig};
pub use tensor::{ParamState, Tensor};
