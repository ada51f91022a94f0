//! Stem, hourglass (block A) and heat-map head (block B).

use super::layers::{Conv2d, ConvUnit, ResSepConv, SepConvUnit};
use super::params::{Ctx, ParamBuilder};
use crate::autodiff::Var;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels_in: usize,
    pub channels_out: usize,
    pub num_resolutions: usize,
    pub base_resolution: usize,
    /// Extra channels added at each lower resolution of the hourglass.
    pub growth: usize,
    pub batch_norm: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            channels_in: 196,
            channels_out: 196,
            num_resolutions: 3,
            base_resolution: 32,
            growth: 0,
            batch_norm: true,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_resolutions == 0 {
            return Err(Error::Config("num_resolutions must be at least 1".into()));
        }
        if self.channels_in == 0 || self.channels_out == 0 || self.base_resolution == 0 {
            return Err(Error::Config("channel counts and base_resolution must be positive".into()));
        }
        let step = 1usize << (self.num_resolutions - 1);
        if self.base_resolution % step != 0 {
            return Err(Error::Config(format!(
                "base_resolution {} is not divisible by 2^{}",
                self.base_resolution,
                self.num_resolutions - 1
            )));
        }
        Ok(())
    }

    fn channels_at(&self, level: usize) -> usize {
        self.channels_in + level * self.growth
    }

    /// Spatial size at each hourglass level, highest first.
    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.num_resolutions).map(|l| self.base_resolution >> l).collect()
    }
}

/// Widths of the three stem stages.
pub fn stem_widths(width_multiplier: f64) -> [usize; 3] {
    [64.0, 128.0, 196.0].map(|w: f64| ((w * width_multiplier).round() as usize).max(1))
}

/// Entry flow: three 3×3 convolutions (strides 2, 1, 2), a separable
/// convolution in parallel with a 1×1 shortcut, then 2×2 max pooling.
/// Reduces the input resolution by 8.
#[derive(Clone, Debug)]
pub struct Stem {
    conv1: ConvUnit,
    conv2: ConvUnit,
    conv3: ConvUnit,
    sep: SepConvUnit,
    shortcut: ConvUnit,
    input_size: usize,
}

impl Stem {
    pub fn new(pb: &mut ParamBuilder, widths: [usize; 3], input_size: usize, batch_norm: bool) -> Self {
        let [w1, w2, w3] = widths;
        Stem {
            conv1: ConvUnit::new(&mut pb.scope("conv1"), 3, w1, 3, 2, batch_norm),
            conv2: ConvUnit::new(&mut pb.scope("conv2"), w1, w1, 3, 1, batch_norm),
            conv3: ConvUnit::new(&mut pb.scope("conv3"), w1, w2, 3, 2, batch_norm),
            sep: SepConvUnit::new(&mut pb.scope("sep"), w2, w3, 3, batch_norm),
            shortcut: ConvUnit::new(&mut pb.scope("shortcut"), w2, w3, 1, 1, batch_norm),
            input_size,
        }
    }

    pub fn param_count(widths: [usize; 3], batch_norm: bool) -> usize {
        let [w1, w2, w3] = widths;
        ConvUnit::param_count(3, w1, 3, batch_norm)
            + ConvUnit::param_count(w1, w1, 3, batch_norm)
            + ConvUnit::param_count(w1, w2, 3, batch_norm)
            + SepConvUnit::param_count(w2, w3, 3, batch_norm)
            + ConvUnit::param_count(w2, w3, 1, batch_norm)
    }

    pub fn forward(&self, ctx: &mut Ctx, image: Var) -> Result<Var> {
        let shape = ctx.tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.input_size || shape[3] != self.input_size {
            return Err(Error::Geometry(format!(
                "stem expects N×3×{0}×{0} images, got {shape:?}",
                self.input_size
            )));
        }
        let x = self.conv1.forward(ctx, image)?;
        let x = self.conv2.forward(ctx, x)?;
        let x = self.conv3.forward(ctx, x)?;
        let a = self.sep.forward(ctx, x)?;
        let b = self.shortcut.forward(ctx, x)?;
        let x = ctx.tape.add(a, b)?;
        ctx.tape.max_pool2(x)
    }
}

/// One level of the hourglass: a skip unit at this resolution and a
/// pooled path that recurses to the next level and is upsampled back.
#[derive(Clone, Debug)]
struct HourglassLevel {
    skip: ResSepConv,
    down: ResSepConv,
    inner: Box<Inner>,
    up: ResSepConv,
}

#[derive(Clone, Debug)]
enum Inner {
    Level(HourglassLevel),
    Bottom(ResSepConv),
}

impl HourglassLevel {
    fn new(pb: &mut ParamBuilder, cfg: &BlockConfig, level: usize) -> Self {
        let (c, c_low) = (cfg.channels_at(level), cfg.channels_at(level + 1));
        let bn = cfg.batch_norm;
        let skip = ResSepConv::new(&mut pb.scope("skip"), c, c, bn);
        let down = ResSepConv::new(&mut pb.scope("down"), c, c_low, bn);
        let inner = if level + 2 < cfg.num_resolutions {
            Inner::Level(HourglassLevel::new(&mut pb.scope("inner"), cfg, level + 1))
        } else {
            Inner::Bottom(ResSepConv::new(&mut pb.scope("bottom"), c_low, c_low, bn))
        };
        let up = ResSepConv::new(&mut pb.scope("up"), c_low, c, bn);
        HourglassLevel {
            skip,
            down,
            inner: Box::new(inner),
            up,
        }
    }

    fn param_count(cfg: &BlockConfig, level: usize) -> usize {
        let (c, c_low) = (cfg.channels_at(level), cfg.channels_at(level + 1));
        let bn = cfg.batch_norm;
        let inner = if level + 2 < cfg.num_resolutions {
            Self::param_count(cfg, level + 1)
        } else {
            ResSepConv::param_count(c_low, c_low, bn)
        };
        ResSepConv::param_count(c, c, bn) + ResSepConv::param_count(c, c_low, bn) + inner + ResSepConv::param_count(c_low, c, bn)
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let skip = self.skip.forward(ctx, x)?;
        let low = ctx.tape.max_pool2(x)?;
        let low = self.down.forward(ctx, low)?;
        let low = match self.inner.as_ref() {
            Inner::Level(level) => level.forward(ctx, low)?,
            Inner::Bottom(unit) => unit.forward(ctx, low)?,
        };
        let low = self.up.forward(ctx, low)?;
        let up = ctx.tape.upsample2(low)?;
        ctx.tape.add(skip, up)
    }
}

/// Hourglass refiner with residual separable units at every node.
#[derive(Clone, Debug)]
pub struct BlockA {
    root: Inner,
    cfg: BlockConfig,
}

impl BlockA {
    pub fn new(pb: &mut ParamBuilder, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.channels_in != cfg.channels_out {
            return Err(Error::Config("block A preserves its channel count".into()));
        }
        let root = if cfg.num_resolutions > 1 {
            Inner::Level(HourglassLevel::new(pb, cfg, 0))
        } else {
            Inner::Bottom(ResSepConv::new(&mut pb.scope("bottom"), cfg.channels_in, cfg.channels_in, cfg.batch_norm))
        };
        Ok(BlockA { root, cfg: cfg.clone() })
    }

    pub fn param_count(cfg: &BlockConfig) -> usize {
        if cfg.num_resolutions > 1 {
            HourglassLevel::param_count(cfg, 0)
        } else {
            ResSepConv::param_count(cfg.channels_in, cfg.channels_in, cfg.batch_norm)
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let res = self.cfg.base_resolution;
        if shape.len() != 4 || shape[1] != self.cfg.channels_in || shape[2] != res || shape[3] != res {
            return Err(Error::Geometry(format!(
                "block A expects N×{}×{res}×{res}, got {shape:?}",
                self.cfg.channels_in
            )));
        }
        match &self.root {
            Inner::Level(level) => level.forward(ctx, x),
            Inner::Bottom(unit) => unit.forward(ctx, x),
        }
    }
}

/// Outputs of block B on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeatMapVars {
    /// All `N_J + N_c·N_J` maps, detection maps first.
    pub maps: Var,
    /// Features for the next prediction block, same shape as the input.
    pub reinjected: Var,
}

/// Produces detection and context heat maps and projects them back into
/// the feature flow.
#[derive(Clone, Debug)]
pub struct BlockB {
    refine: SepConvUnit,
    heatmaps: Conv2d,
    feature_proj: Conv2d,
    heatmap_proj: Conv2d,
    num_maps: usize,
}

impl BlockB {
    pub fn new(pb: &mut ParamBuilder, channels: usize, num_maps: usize, batch_norm: bool) -> Self {
        BlockB {
            refine: SepConvUnit::new(&mut pb.scope("refine"), channels, channels, 3, batch_norm),
            heatmaps: Conv2d::new(&mut pb.scope("heatmaps"), channels, num_maps, 1, 1, true),
            feature_proj: Conv2d::new(&mut pb.scope("feature_proj"), channels, channels, 1, 1, true),
            heatmap_proj: Conv2d::new(&mut pb.scope("heatmap_proj"), num_maps, channels, 1, 1, true),
            num_maps,
        }
    }

    pub fn num_maps(&self) -> usize {
        self.num_maps
    }

    pub fn param_count(channels: usize, num_maps: usize, batch_norm: bool) -> usize {
        SepConvUnit::param_count(channels, channels, 3, batch_norm)
            + Conv2d::param_count(channels, num_maps, 1, true)
            + Conv2d::param_count(channels, channels, 1, true)
            + Conv2d::param_count(num_maps, channels, 1, true)
    }

    /// Heat maps, and `x + proj(refined) + proj(heat maps)` for the next block.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<HeatMapVars> {
        let t = self.refine.forward(ctx, x)?;
        let maps = self.heatmaps.forward(ctx, t)?;
        let f = self.feature_proj.forward(ctx, t)?;
        let h = self.heatmap_proj.forward(ctx, maps)?;
        let r = ctx.tape.add(x, f)?;
        let reinjected = ctx.tape.add(r, h)?;
        Ok(HeatMapVars { maps, reinjected })
    }
}
