//! The full network: stem followed by K prediction blocks, each regressing
//! joint coordinates from its heat maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{stem_widths, BlockA, BlockB, BlockConfig, Ctx, Mode, ParamBuilder, ParamStore, Stem};
use crate::tensor::{Float, Tensor};

/// Below this total context probability the aggregation falls back to the
/// detection estimate.
pub const CONTEXT_EPS: Float = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of prediction blocks (K).
    pub blocks: usize,
    pub num_joints: usize,
    /// Context maps per joint.
    pub num_context: usize,
    /// Weight of the detection estimate in the aggregated location.
    pub alpha: f64,
    pub input_size: usize,
    pub base_resolution: usize,
    pub num_resolutions: usize,
    pub width_multiplier: f64,
    pub growth: usize,
    pub batch_norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Full-size geometry: 256×256 input, 8 blocks, 16 joints, 2 context maps each.
    pub fn paper() -> Self {
        ModelConfig {
            blocks: 8,
            num_joints: 16,
            num_context: 2,
            alpha: 0.8,
            input_size: 256,
            base_resolution: 32,
            num_resolutions: 3,
            width_multiplier: 1.0,
            growth: 0,
            batch_norm: true,
            seed: 0,
        }
    }

    /// CPU-sized geometry: 64×64 input, two resolutions at 8×8 and 4×4.
    pub fn desk() -> Self {
        ModelConfig {
            blocks: 2,
            num_joints: 8,
            num_context: 2,
            alpha: 0.8,
            input_size: 64,
            base_resolution: 8,
            num_resolutions: 2,
            width_multiplier: 0.25,
            growth: 0,
            batch_norm: true,
            seed: 0,
        }
    }

    pub fn num_maps(&self) -> usize {
        self.num_joints * (1 + self.num_context)
    }

    pub fn widths(&self) -> [usize; 3] {
        stem_widths(self.width_multiplier)
    }

    pub fn block_config(&self) -> BlockConfig {
        let c = self.widths()[2];
        BlockConfig {
            channels_in: c,
            channels_out: c,
            num_resolutions: self.num_resolutions,
            base_resolution: self.base_resolution,
            growth: self.growth,
            batch_norm: self.batch_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.num_joints == 0 {
            return Err(Error::Config("blocks and num_joints must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        if self.input_size != 8 * self.base_resolution {
            return Err(Error::Geometry(format!(
                "input size {} is not 8 × base resolution {}",
                self.input_size, self.base_resolution
            )));
        }
        self.block_config().validate()
    }

    /// Parameter count from the per-block formulas.
    pub fn expected_param_count(&self) -> usize {
        let widths = self.widths();
        let bc = self.block_config();
        Stem::param_count(widths, self.batch_norm)
            + self.blocks * (BlockA::param_count(&bc) + BlockB::param_count(widths[2], self.num_maps(), self.batch_norm))
    }
}

/// Joint locations in normalized image coordinates (top-left `(0, 0)`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub joints: Vec<[Float; 2]>,
    pub probabilities: Vec<Float>,
    pub visibility: Vec<bool>,
}

impl Pose {
    /// A ground-truth pose; probabilities mirror visibility.
    pub fn truth(joints: Vec<[Float; 2]>, visibility: Vec<bool>) -> Self {
        let probabilities = visibility.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Pose {
            joints,
            probabilities,
            visibility,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }
}

/// Raw (pre-softmax) heat maps of one prediction block for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMapSet {
    /// `N_J × R × R`.
    pub detection: Tensor,
    /// `(N_c·N_J) × R × R`, joint-major: map `i` of joint `n` is at `n·N_c + i`.
    pub context: Option<Tensor>,
}

impl HeatMapSet {
    pub fn resolution(&self) -> usize {
        self.detection.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPrediction {
    pub pose: Pose,
    pub heatmaps: HeatMapSet,
}

/// Per-block predictions for one sample; the last entry is the final pose.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub blocks: Vec<BlockPrediction>,
}

impl PredictionSet {
    pub fn final_pose(&self) -> &Pose {
        &self.blocks.last().expect("prediction set is never empty").pose
    }
}

/// Tape outputs of one prediction block.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    /// `N × M × R × R`.
    pub maps: Var,
    /// Soft-argmax of every map, `N × M × 2`.
    pub coords: Var,
    /// Presence probability of every map, `N × M`.
    pub probs: Var,
    /// Aggregated joints, `N × N_J × 2`.
    pub pose: Var,
}

/// Combines a detection estimate with probability-weighted context estimates:
/// `α·y_d + (1−α)·Σ p_i y_i / Σ p_i`. Without usable context, returns `y_d`.
pub fn aggregate(y_d: [Float; 2], p_c: &[Float], y_c: &[[Float; 2]], alpha: Float) -> [Float; 2] {
    debug_assert_eq!(p_c.len(), y_c.len());
    let total: Float = p_c.iter().sum();
    if p_c.is_empty() || total < CONTEXT_EPS {
        return y_d;
    }
    let mut ctx = [0.0; 2];
    for (p, y) in p_c.iter().zip(y_c) {
        ctx[0] += p * y[0];
        ctx[1] += p * y[1];
    }
    // Clamp to the hull of the inputs so rounding never leaves it.
    let mut out = [0.0; 2];
    for d in 0..2 {
        let (mut lo, mut hi) = (y_d[d], y_d[d]);
        for (p, y) in p_c.iter().zip(y_c) {
            if *p > 0.0 {
                lo = lo.min(y[d]);
                hi = hi.max(y[d]);
            }
        }
        out[d] = (alpha * y_d[d] + (1.0 - alpha) * ctx[d] / total).clamp(lo, hi);
    }
    out
}

struct Aggregate {
    joints: usize,
    context: usize,
    alpha: Float,
}

impl Aggregate {
    fn maps(&self) -> usize {
        self.joints * (1 + self.context)
    }

    fn context_slot(&self, joint: usize, i: usize) -> usize {
        self.joints + joint * self.context + i
    }
}

impl Backward for Aggregate {
    fn name(&self) -> &'static str {
        "aggregate"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[Float], needs: &[bool]) -> Vec<Option<Vec<Float>>> {
        let (coords, probs) = (inputs[0].data(), inputs[1].data());
        let m = self.maps();
        let mut dc = vec![0.0; coords.len()];
        let mut dp = vec![0.0; probs.len()];
        for (s, gs) in g.chunks_exact(2 * self.joints).enumerate() {
            let (c, p) = (&coords[s * 2 * m..(s + 1) * 2 * m], &probs[s * m..(s + 1) * m]);
            let (dcs, dps) = (&mut dc[s * 2 * m..(s + 1) * 2 * m], &mut dp[s * m..(s + 1) * m]);
            for n in 0..self.joints {
                let (gx, gy) = (gs[2 * n], gs[2 * n + 1]);
                let slots: Vec<usize> = (0..self.context).map(|i| self.context_slot(n, i)).collect();
                let total: Float = slots.iter().map(|&k| p[k]).sum();
                if slots.is_empty() || total < CONTEXT_EPS {
                    dcs[2 * n] += gx;
                    dcs[2 * n + 1] += gy;
                    continue;
                }
                dcs[2 * n] += self.alpha * gx;
                dcs[2 * n + 1] += self.alpha * gy;
                let w = 1.0 - self.alpha;
                let mut mean = [0.0; 2];
                for &k in &slots {
                    mean[0] += p[k] * c[2 * k];
                    mean[1] += p[k] * c[2 * k + 1];
                }
                mean = [mean[0] / total, mean[1] / total];
                for &k in &slots {
                    dcs[2 * k] += w * p[k] / total * gx;
                    dcs[2 * k + 1] += w * p[k] / total * gy;
                    dps[k] += w / total * (gx * (c[2 * k] - mean[0]) + gy * (c[2 * k + 1] - mean[1]));
                }
            }
        }
        vec![needs[0].then_some(dc), needs[1].then_some(dp)]
    }
}

impl Tape {
    /// Applies [`aggregate`] per joint: coords `N×M×2`, probs `N×M` → `N×N_J×2`.
    pub fn aggregate(&mut self, coords: Var, probs: Var, joints: usize, context: usize, alpha: Float) -> Result<Var> {
        let op = Aggregate { joints, context, alpha };
        let m = op.maps();
        let (cs, ps) = (self.shape(coords).to_vec(), self.shape(probs).to_vec());
        if cs.len() != 3 || cs[1] != m || cs[2] != 2 || ps != cs[..2] {
            return Err(Error::shape(
                "aggregate",
                format!("coords {cs:?}, probs {ps:?} for {joints} joints × {context} context maps"),
            ));
        }
        let n = cs[0];
        let (c, p) = (self.value(coords).data(), self.value(probs).data());
        let mut out = Vec::with_capacity(n * joints * 2);
        for s in 0..n {
            let (c, p) = (&c[s * 2 * m..(s + 1) * 2 * m], &p[s * m..(s + 1) * m]);
            for j in 0..joints {
                let slots: Vec<usize> = (0..context).map(|i| op.context_slot(j, i)).collect();
                let pc: Vec<Float> = slots.iter().map(|&k| p[k]).collect();
                let yc: Vec<[Float; 2]> = slots.iter().map(|&k| [c[2 * k], c[2 * k + 1]]).collect();
                out.extend(aggregate([c[2 * j], c[2 * j + 1]], &pc, &yc, alpha));
            }
        }
        self.record(&[coords, probs], Tensor::from_parts(vec![n, joints, 2], out), op)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    stem: Stem,
    blocks: Vec<(BlockA, BlockB)>,
}

impl Model {
    /// Builds the network with weights drawn from the config seed.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let widths = cfg.widths();
        let stem = Stem::new(&mut pb.scope("stem"), widths, cfg.input_size, cfg.batch_norm);
        let bc = cfg.block_config();
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for k in 0..cfg.blocks {
            let mut scope = pb.scope(&format!("block{k}"));
            let a = BlockA::new(&mut scope.scope("a"), &bc)?;
            let b = BlockB::new(&mut scope.scope("b"), widths[2], cfg.num_maps(), cfg.batch_norm);
            blocks.push((a, b));
        }
        Ok(Model {
            cfg,
            store,
            stem,
            blocks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Runs the network on `N×3×S×S` images and returns every block's outputs.
    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<Vec<BlockOutput>> {
        let mut x = self.stem.forward(ctx, images)?;
        let (nj, nc) = (self.cfg.num_joints, self.cfg.num_context);
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for (a, b) in &self.blocks {
            let refined = a.forward(ctx, x)?;
            let heat = b.forward(ctx, refined)?;
            let coords = ctx.tape.soft_argmax(heat.maps)?;
            let probs = ctx.tape.joint_probability(heat.maps)?;
            let pose = ctx.tape.aggregate(coords, probs, nj, nc, self.cfg.alpha as Float)?;
            outputs.push(BlockOutput {
                maps: heat.maps,
                coords,
                probs,
                pose,
            });
            x = heat.reinjected;
        }
        Ok(outputs)
    }

    /// Inference on a batch `N×3×S×S` using running batch-norm statistics.
    pub fn predict_batch(&self, images: &Tensor) -> Result<Vec<PredictionSet>> {
        let mut ctx = Ctx::new(&self.store, Mode::Eval, false);
        let x = ctx.tape.constant(images.clone())?;
        let outputs = self.forward(&mut ctx, x)?;
        let n = images.shape()[0];
        let (nj, m) = (self.cfg.num_joints, self.cfg.num_maps());
        let mut sets: Vec<PredictionSet> = (0..n).map(|_| PredictionSet { blocks: Vec::new() }).collect();
        for out in outputs {
            let maps = ctx.tape.value(out.maps);
            let pose = ctx.tape.value(out.pose).data();
            let probs = ctx.tape.value(out.probs).data();
            for (s, set) in sets.iter_mut().enumerate() {
                let sample = maps.index_first(s);
                let r = sample.shape()[1];
                let data = sample.data();
                let detection = Tensor::from_parts(vec![nj, r, r], data[..nj * r * r].to_vec());
                let context = (m > nj).then(|| Tensor::from_parts(vec![m - nj, r, r], data[nj * r * r..].to_vec()));
                let joints = (0..nj).map(|j| [pose[(s * nj + j) * 2], pose[(s * nj + j) * 2 + 1]]).collect();
                set.blocks.push(BlockPrediction {
                    pose: Pose {
                        joints,
                        probabilities: probs[s * m..s * m + nj].to_vec(),
                        visibility: vec![true; nj],
                    },
                    heatmaps: HeatMapSet { detection, context },
                });
            }
        }
        Ok(sets)
    }

    /// Final-block pose of a single `3×S×S` image.
    pub fn predict(&self, image: &Tensor) -> Result<Pose> {
        let batch = Tensor::stack(std::slice::from_ref(image))?;
        let mut sets = self.predict_batch(&batch)?;
        Ok(sets.remove(0).blocks.pop().expect("at least one block").pose)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_cases() {
        assert_eq!(aggregate([0.3, 0.4], &[0.9], &[[0.9, 0.9]], 1.0), [0.3, 0.4]);
        let sym = aggregate([0.5, 0.5], &[0.5, 0.5], &[[0.6, 0.5], [0.4, 0.5]], 0.8);
        assert!((sym[0] - 0.5).abs() < 1e-15 && (sym[1] - 0.5).abs() < 1e-15);
        assert_eq!(aggregate([0.2, 0.7], &[], &[], 0.8), [0.2, 0.7]);
        assert_eq!(aggregate([0.2, 0.7], &[0.0, 0.0], &[[0.1, 0.1], [0.9, 0.9]], 0.5), [0.2, 0.7]);
    }

    #[test]
    fn geometry_is_validated() {
        let mut cfg = ModelConfig::desk();
        cfg.input_size = 96;
        assert!(matches!(Model::new(cfg), Err(Error::Geometry(_))));
        let mut cfg = ModelConfig::desk();
        cfg.alpha = 1.5;
        assert!(matches!(Model::new(cfg), Err(Error::Config(_))));
    }
}
