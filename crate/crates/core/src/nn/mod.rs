//! Network building blocks shared by the autoencoder, the vision encoder and
//! the denoising U-Net, plus the AdamW optimizer.

mod adamw;
mod layers;
mod params;

pub use adamw::{AdamW, AdamWConfig};
pub use layers::{
    norm_groups, timestep_embedding, AttentionBlock, Conv2d, Downsample, GroupNorm, Linear, ResBlock,
    ResBlockOptions, Upsample, GROUP_NORM_EPS,
};
pub use params::{uniform_fan_in, Binding, ParamId, ParamStore};
