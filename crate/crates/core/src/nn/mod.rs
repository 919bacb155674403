//! A small CPU layer engine: NHWC tensors, layers with hand-written
//! backward passes, windowed attention, Adam and a checkpoint format.

pub mod attention;
pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod param;
pub mod tensor;

#[cfg(test)]
pub(crate) mod gradcheck;

pub use attention::WindowAttention;
pub use checkpoint::Checkpoint;
pub use layers::{
    BatchNorm, Conv2d, DepthwiseConv2d, Gelu, GlobalAvgPool, LayerNorm, LayerScale, Linear, MaxPool, PatchGather,
    Relu, Residual, Sequential,
};
pub use optim::Adam;
pub use param::{Init, Layer, Mode, Module, Param};
pub use tensor::{Real, Tensor};
