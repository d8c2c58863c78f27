//! Tensor kernels without gradient tracking.
//!
//! The differentiable versions live on [`Tape`](crate::Tape) and reuse these.

mod activation;
mod conv;
mod dropout;
mod norm;
mod pool;
mod resample;

pub use activation::{log_sigmoid, pointwise, sigmoid, softmax, softplus, Pointwise};
pub use conv::{conv3d, conv_transpose3d, ConvSpec};
pub use dropout::dropout;
pub use norm::{
    batch_norm3d, layer_norm, NormMode, RunningStats, BN_EPS, BN_MOMENTUM, LN_EPS,
};
pub use pool::global_avg_pool3d;
pub use resample::upsample_trilinear;

pub(crate) use activation::axis_layout;
pub(crate) use conv::{channel_sums, conv3d_backward, conv_transpose3d_backward};
pub(crate) use dropout::dropout_mask;
pub(crate) use norm::{batch_norm_forward, layer_norm_forward, unbiased};
pub(crate) use resample::upsample_trilinear_backward;
