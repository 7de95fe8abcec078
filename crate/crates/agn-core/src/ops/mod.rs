//! Differentiable layer primitives: forward evaluation plus exact analytic
//! backward passes, each validated against finite differences in the tests.

pub mod activation;
pub mod conv;
pub mod dropout;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod softmax;

pub use activation::{activation_backward, activation_forward, sigmoid, Activation, ActivationConfig};
pub use conv::{conv2d_backward, conv2d_forward, conv_out_extent, transpose_conv2d_backward, transpose_conv2d_forward};
pub use dropout::{dropout_backward, dropout_forward};
pub use loss::{bce_loss, bce_loss_backward, BCE_CLAMP};
pub use norm::{batchnorm2d_backward, batchnorm2d_forward, BnCache, BN_EPS, BN_MOMENTUM};
pub use pool::{maxpool2d_backward, maxpool2d_forward, upsample_nearest_backward, upsample_nearest_forward};
pub use softmax::{masked_row_softmax, masked_row_softmax_backward};
