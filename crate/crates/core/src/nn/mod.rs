//! Differentiable building blocks on top of candle tensors.

pub mod blocks;
pub mod deform;
pub mod flops;
pub mod gradcheck;
pub mod layers;
pub mod params;

pub use blocks::{
    AdaptiveUpsample, ChannelAttention, ConvLstmCell, GcaBlock, GgUnit, LstmState, ResidualBlock,
    SpatialAttention,
};
pub use deform::{deform_conv, deform_sample, DeformConv2d, DeformField};
pub use layers::{depth_to_space, lrelu, sigmoid, space_to_depth, upsample2x, Conv2d, ConvTranspose2d};
pub use params::{Init, ParamStore};
