//! Differentiable primitives recorded on a [`Tape`](crate::autodiff::Tape).

mod activation;
mod arith;
mod conv;
mod norm;
mod pool;
mod resample;

pub use activation::{relu, sigmoid, sigmoid_scalar};
pub use arith::{add_scaled, add_scaled_var, sum, weighted_sum};
pub use conv::{conv2d, Padding};
pub use norm::{batchnorm2d, BatchNormCfg, Mode, RunningStats};
pub use pool::{max_unpool2x2, maxpool2x2, PoolIndices};
pub use resample::{concat_channels, upsample_nearest2x};
