//! Layer and loss vocabulary of the U-net: convolutions, pooling,
//! up-convolution, concatenation, batch normalization, temperature softmax
//! and the class-weighted hard and soft cross-entropies.

mod activation;
mod conv;
mod loss;
mod norm;
mod pool;

pub use activation::{concat_channels, relu};
pub use conv::{conv2d, conv_transpose2d, ConvParams, Padding};
pub use loss::{
    soft_cross_entropy, soft_cross_entropy_parts, softmax_temperature, softmax_temperature_tensor,
    weighted_cross_entropy, weighted_cross_entropy_parts, ClassWeights,
};
pub use norm::{
    batch_norm2d, batch_norm2d_eval, batch_norm2d_train, BatchNormParams, BatchStats, Mode,
    DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM,
};
pub use pool::max_pool2d;
