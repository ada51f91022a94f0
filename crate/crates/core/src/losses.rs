//! Coordinate (elastic net) and presence (binary cross-entropy) losses.

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BlockOutput, PredictionSet};
use crate::softargmax::joint_probability;
use crate::tensor::{Float, Tensor};
use crate::Pose;

/// Predicted probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before logs.
pub const P_CLAMP: Float = 1e-7;

/// `(1/N_J) Σ_n mask_n (‖y_n − ŷ_n‖₁ + ‖y_n − ŷ_n‖₂²)` with the truth's
/// visibility as mask.
pub fn elastic_net_loss(pred: &Pose, truth: &Pose) -> Result<Float> {
    if pred.num_joints() != truth.num_joints() {
        return Err(Error::JointCount {
            expected: truth.num_joints(),
            got: pred.num_joints(),
        });
    }
    let n = truth.num_joints() as Float;
    let mut total = 0.0;
    for ((p, t), &visible) in pred.joints.iter().zip(&truth.joints).zip(&truth.visibility) {
        if visible {
            let (dx, dy) = (t[0] - p[0], t[1] - p[1]);
            total += dx.abs() + dy.abs() + dx * dx + dy * dy;
        }
    }
    Ok(total / n)
}

fn clamp_probability(p: Float) -> Float {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

/// `(1/N) Σ_n [(t_n − 1) log(1 − p̂_n) − t_n log p̂_n]`.
pub fn bce_loss(pred: &[Float], truth: &[Float]) -> Result<Float> {
    if pred.len() != truth.len() {
        return Err(Error::JointCount {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    let n = truth.len() as Float;
    let total: Float = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let p = clamp_probability(p);
            (t - 1.0) * (1.0 - p).ln() - t * p.ln()
        })
        .sum();
    Ok(total / n)
}

struct ElasticNet {
    diff: Vec<Float>,
    mask: Vec<bool>,
    scale: Float,
}

impl Backward for ElasticNet {
    fn name(&self) -> &'static str {
        "elastic_net_loss"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[Float], _: &[bool]) -> Vec<Option<Vec<Float>>> {
        // diff = pred - truth; the L1 subgradient at zero is zero.
        let grad = self
            .diff
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                if self.mask[i / 2] {
                    let sign = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    g[0] * self.scale * (sign + 2.0 * d)
                } else {
                    0.0
                }
            })
            .collect();
        vec![Some(grad)]
    }
}

struct BinaryCrossEntropy {
    targets: Vec<Float>,
    scale: Float,
}

impl Backward for BinaryCrossEntropy {
    fn name(&self) -> &'static str {
        "bce_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[Float], _: &[bool]) -> Vec<Option<Vec<Float>>> {
        let grad = inputs[0]
            .data()
            .iter()
            .zip(&self.targets)
            .map(|(&p, &t)| {
                if p <= P_CLAMP || p >= 1.0 - P_CLAMP {
                    0.0
                } else {
                    g[0] * self.scale * ((1.0 - t) / (1.0 - p) - t / p)
                }
            })
            .collect();
        vec![Some(grad)]
    }
}

impl Tape {
    /// Batch mean of the elastic-net loss. `pred` and `truth` are `N×N_J×2`,
    /// `mask` holds `N·N_J` visibility flags.
    pub fn elastic_net_loss(&mut self, pred: Var, truth: &Tensor, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if shape.len() != 3 || shape[2] != 2 || truth.shape() != shape.as_slice() || mask.len() != shape[0] * shape[1] {
            return Err(Error::shape(
                "elastic_net_loss",
                format!("pred {shape:?}, truth {:?}, mask {}", truth.shape(), mask.len()),
            ));
        }
        let scale = 1.0 / (shape[0] * shape[1]) as Float;
        let diff: Vec<Float> = self.value(pred).data().iter().zip(truth.data()).map(|(p, t)| p - t).collect();
        let mut total = 0.0;
        for (d, &m) in diff.chunks_exact(2).zip(mask) {
            if m {
                total += d[0].abs() + d[1].abs() + d[0] * d[0] + d[1] * d[1];
            }
        }
        let op = ElasticNet {
            diff,
            mask: mask.to_vec(),
            scale,
        };
        self.record(&[pred], Tensor::scalar(total * scale), op)
    }

    /// Batch mean of the binary cross-entropy; `pred` and `targets` share a shape `N×C`.
    pub fn bce_loss(&mut self, pred: Var, targets: &Tensor) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if shape.as_slice() != targets.shape() {
            return Err(Error::shape("bce_loss", format!("{shape:?} vs {:?}", targets.shape())));
        }
        let scale = 1.0 / targets.numel() as Float;
        let mut total = 0.0;
        for (&p, &t) in self.value(pred).data().iter().zip(targets.data()) {
            let p = clamp_probability(p);
            total += (t - 1.0) * (1.0 - p).ln() - t * p.ln();
        }
        let op = BinaryCrossEntropy {
            targets: targets.data().to_vec(),
            scale,
        };
        self.record(&[pred], Tensor::scalar(total * scale), op)
    }
}

/// Which location each block's coordinate loss supervises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// The detection/context aggregate.
    Aggregated,
    /// The detection-map soft-argmax only.
    Detection,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the probability loss relative to the coordinate loss.
    pub lambda_p: Float,
    pub supervision: Supervision,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_p: 0.01,
            supervision: Supervision::Aggregated,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockLoss {
    pub coordinate: Float,
    /// Detection plus context presence losses.
    pub probability: Float,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub coordinate_loss: Float,
    pub probability_loss: Float,
    pub per_block: Vec<BlockLoss>,
    pub total: Float,
}

impl LossReport {
    fn from_blocks(per_block: Vec<BlockLoss>, lambda_p: Float) -> Self {
        let coordinate_loss = per_block.iter().map(|b| b.coordinate).sum();
        let probability_loss = per_block.iter().map(|b| b.probability).sum();
        let total = per_block.iter().map(|b| b.coordinate + lambda_p * b.probability).sum();
        LossReport {
            coordinate_loss,
            probability_loss,
            per_block,
            total,
        }
    }
}

/// Ground truth of a batch in the layouts the tape losses expect.
#[derive(Clone, Debug)]
pub struct TruthBatch {
    /// `N×N_J×2`.
    pub coords: Tensor,
    /// `N·N_J` visibility flags.
    pub mask: Vec<bool>,
    /// Detection targets `N×N_J`.
    pub detection: Tensor,
    /// Context targets `N×(N_J·N_c)`, joint-major.
    pub context: Option<Tensor>,
}

impl TruthBatch {
    pub fn new(poses: &[&Pose], num_context: usize) -> Result<Self> {
        let first = poses.first().ok_or_else(|| Error::Config("empty batch".into()))?;
        let nj = first.num_joints();
        let n = poses.len();
        let mut coords = Vec::with_capacity(n * nj * 2);
        let mut mask = Vec::with_capacity(n * nj);
        let mut ctx = Vec::with_capacity(n * nj * num_context);
        for p in poses {
            if p.num_joints() != nj {
                return Err(Error::JointCount {
                    expected: nj,
                    got: p.num_joints(),
                });
            }
            coords.extend(p.joints.iter().flatten());
            mask.extend(&p.visibility);
            for &v in &p.visibility {
                ctx.extend(std::iter::repeat_n(if v { 1.0 } else { 0.0 }, num_context));
            }
        }
        let detection = mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Ok(TruthBatch {
            coords: Tensor::from_parts(vec![n, nj, 2], coords),
            mask,
            detection: Tensor::from_parts(vec![n, nj], detection),
            context: (num_context > 0).then(|| Tensor::from_parts(vec![n, nj * num_context], ctx)),
        })
    }
}

/// Sums the per-block losses on the tape. Returns the scalar to
/// backpropagate and its breakdown. `block_weights`, when given, scales
/// each block's contribution to the returned scalar.
pub fn training_loss_on_tape(
    tape: &mut Tape,
    outputs: &[BlockOutput],
    truth: &TruthBatch,
    cfg: &LossConfig,
    block_weights: Option<&[Float]>,
) -> Result<(Var, LossReport)> {
    let nj = truth.detection.shape()[1];
    let mut per_block = Vec::with_capacity(outputs.len());
    let mut total: Option<Var> = None;
    for (k, out) in outputs.iter().enumerate() {
        let located = match cfg.supervision {
            Supervision::Aggregated => out.pose,
            Supervision::Detection => tape.narrow(out.coords, 1, 0, nj)?,
        };
        let coord = tape.elastic_net_loss(located, &truth.coords, &truth.mask)?;
        let det_p = tape.narrow(out.probs, 1, 0, nj)?;
        let mut prob = tape.bce_loss(det_p, &truth.detection)?;
        if let Some(targets) = &truth.context {
            let ctx_p = tape.narrow(out.probs, 1, nj, targets.shape()[1])?;
            let c = tape.bce_loss(ctx_p, targets)?;
            prob = tape.add(prob, c)?;
        }
        per_block.push(BlockLoss {
            coordinate: tape.value(coord).item(),
            probability: tape.value(prob).item(),
        });
        let weighted_prob = tape.scale(prob, cfg.lambda_p)?;
        let mut block = tape.add(coord, weighted_prob)?;
        if let Some(w) = block_weights {
            block = tape.scale(block, w[k])?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, block)?,
            None => block,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no prediction blocks".into()))?;
    Ok((total, LossReport::from_blocks(per_block, cfg.lambda_p)))
}

/// Loss breakdown of one sample's predictions, computed from values.
pub fn training_loss(prediction: &PredictionSet, truth: &Pose, cfg: &LossConfig) -> Result<LossReport> {
    let targets: Vec<Float> = truth.visibility.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mut per_block = Vec::with_capacity(prediction.blocks.len());
    for block in &prediction.blocks {
        let located = match cfg.supervision {
            Supervision::Aggregated => block.pose.clone(),
            Supervision::Detection => {
                let maps = &block.heatmaps.detection;
                let joints = (0..maps.shape()[0])
                    .map(|j| crate::softargmax::soft_argmax(&maps.index_first(j)).map(|(x, y)| [x, y]))
                    .collect::<Result<_>>()?;
                Pose {
                    joints,
                    ..block.pose.clone()
                }
            }
        };
        let coordinate = elastic_net_loss(&located, truth)?;
        let mut probability = bce_loss(&block.pose.probabilities, &targets)?;
        if let Some(context) = &block.heatmaps.context {
            let per_joint = context.shape()[0] / truth.num_joints();
            let probs = (0..context.shape()[0])
                .map(|c| joint_probability(&context.index_first(c)))
                .collect::<Result<Vec<_>>>()?;
            let ctx_targets: Vec<Float> = targets
                .iter()
                .flat_map(|&t| std::iter::repeat_n(t, per_joint))
                .collect();
            probability += bce_loss(&probs, &ctx_targets)?;
        }
        per_block.push(BlockLoss {
            coordinate,
            probability,
        });
    }
    Ok(LossReport::from_blocks(per_block, cfg.lambda_p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elastic_net_examples() {
        let truth = Pose::truth(vec![[0.5, 0.5]], vec![true]);
        assert_eq!(elastic_net_loss(&truth, &truth).unwrap(), 0.0);
        let pred = Pose::truth(vec![[0.8, 0.9]], vec![true]);
        assert!((elastic_net_loss(&pred, &truth).unwrap() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn invisible_joints_are_masked() {
        let truth = Pose::truth(vec![[0.5, 0.5], [0.1, 0.1]], vec![true, false]);
        let pred = Pose::truth(vec![[0.5, 0.5], [0.9, 0.9]], vec![true, true]);
        assert_eq!(elastic_net_loss(&pred, &truth).unwrap(), 0.0);
    }

    #[test]
    fn joint_count_mismatch() {
        let a = Pose::truth(vec![[0.5, 0.5]], vec![true]);
        let b = Pose::truth(vec![[0.5, 0.5]; 2], vec![true; 2]);
        assert!(matches!(elastic_net_loss(&a, &b), Err(Error::JointCount { .. })));
    }

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&[1.0 - 1e-7], &[1.0]).unwrap() < 2e-7);
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - (2.0 as Float).ln()).abs() < 1e-15);
        // Clamped: no infinities.
        assert!(bce_loss(&[0.0, 1.0], &[1.0, 0.0]).unwrap().is_finite());
    }
}
