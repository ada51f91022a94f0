//! Network layers, parameter storage and the per-pass forward context.

mod blocks;
mod layers;
mod params;

pub use blocks::{stem_widths, BlockA, BlockB, BlockConfig, HeatMapVars, Stem};
pub use layers::{BatchNorm2d, Conv2d, ConvUnit, ResSepConv, SepConv2d, SepConvUnit, BN_EPS, BN_MOMENTUM};
pub use params::{BatchNormUpdate, BufferId, Ctx, Mode, ParamBuilder, ParamId, ParamStore};
