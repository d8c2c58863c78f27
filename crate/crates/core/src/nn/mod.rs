//! Parameterized layers and the building blocks shared by the network.

mod blocks;
mod layers;
mod params;

pub use blocks::{BasicBlock3d, Dpfr, DpfrTrace, SqueezeExcite};
pub use layers::{dropout, BatchNorm3d, Conv3d, ConvTranspose3d, Init, LayerNorm, Linear};
pub use params::{Buffer, BufferId, Builder, Ctx, ForwardOptions, Param, ParamId, ParamStore};
