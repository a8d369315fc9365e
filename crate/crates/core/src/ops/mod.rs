//! Differentiable primitives. Each op is a method on [`Graph`](crate::Graph)
//! that computes the forward value and registers its backward rule.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod pool;
mod resize;
mod shape;

pub use conv::{conv2d_direct, conv2d_im2col, Conv2dSpec};
pub use elementwise::{sigmoid, Activation};
pub use norm::{BatchNormStats, Mode, BN_MOMENTUM, NORM_EPS};
