//! Minimal CPU convolutional network engine: NHWC tensors, explicit
//! backpropagation, Adam.

pub mod gemm;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;

pub use layers::{Conv2d, Dense, DepthwiseConv2d, Layer, Padding, Pool2d, PoolKind};
pub use model::{Block, BlockRole, LossOutput, Model};
pub use optim::Adam;
pub use params::{Grads, Param, ParamId, ParamStore};

#[cfg(test)]
mod gradcheck;
