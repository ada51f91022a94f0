//! Synthetic pose images: one colored Gaussian blob per joint of a small
//! kinematic tree, drawn over a textured noise background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Annotation, CropConfig, Image};
use crate::error::{Error, Result};
use crate::metrics::{Limb, Metric, MetricConfig};
use crate::tensor::Float;
use crate::Pose;

pub const SYNTH_JOINT_NAMES: [&str; 8] =
    ["torso", "head", "l_shoulder", "r_shoulder", "l_hip", "r_hip", "l_hand", "r_hand"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonJoint {
    pub name: String,
    /// `None` for the root.
    pub parent: Option<usize>,
    /// Rest offset from the parent as a fraction of the canvas side (y down).
    pub offset: [Float; 2],
    /// The offset direction is perturbed uniformly within ± this many degrees.
    pub angle_jitter: Float,
    /// Whether the joint may be randomly hidden.
    pub occludable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub canvas: usize,
    /// Standard deviation of each blob in pixels.
    pub blob_sigma: Float,
    /// Joints in topological order (parents before children).
    pub skeleton: Vec<SkeletonJoint>,
    /// Relative limb length perturbation, uniform in ± this fraction.
    pub length_jitter: Float,
    /// Whole-body rotation range in degrees.
    pub body_rotation: Float,
    /// Whole-body scale interval.
    pub body_scale: (Float, Float),
    /// Probability that an occludable joint is hidden (not drawn, invisible).
    pub occlusion_prob: Float,
    pub noise_amplitude: Float,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let joint = |name: &str, parent: Option<usize>, offset: [Float; 2], angle_jitter: Float, occludable: bool| {
            SkeletonJoint {
                name: name.to_string(),
                parent,
                offset,
                angle_jitter,
                occludable,
            }
        };
        SyntheticSpec {
            canvas: 64,
            blob_sigma: 1.5,
            skeleton: vec![
                joint("torso", None, [0.0, 0.0], 0.0, false),
                joint("head", Some(0), [0.0, -0.25], 20.0, true),
                joint("l_shoulder", Some(0), [-0.13, -0.12], 10.0, false),
                joint("r_shoulder", Some(0), [0.13, -0.12], 10.0, false),
                joint("l_hip", Some(0), [-0.09, 0.16], 10.0, false),
                joint("r_hip", Some(0), [0.09, 0.16], 10.0, false),
                joint("l_hand", Some(2), [-0.08, 0.17], 70.0, true),
                joint("r_hand", Some(3), [0.08, 0.17], 70.0, true),
            ],
            length_jitter: 0.15,
            body_rotation: 30.0,
            body_scale: (0.9, 1.2),
            occlusion_prob: 0.0,
            noise_amplitude: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_joints(&self) -> usize {
        self.skeleton.len()
    }

    pub fn joint_names(&self) -> Vec<String> {
        self.skeleton.iter().map(|j| j.name.clone()).collect()
    }

    /// Metric settings for this skeleton: joint names as columns, the
    /// `l_shoulder`–`r_hip` diagonal as reference length (falling back to
    /// joints 0 and 1) and one limb per parent–child edge.
    pub fn metric_config(&self, metric: Metric, threshold: Float) -> MetricConfig {
        let find = |name: &str| self.skeleton.iter().position(|j| j.name == name);
        let normalizer = match (find("l_shoulder"), find("r_hip")) {
            (Some(a), Some(b)) => (a, b),
            _ => (0, 1.min(self.num_joints() - 1)),
        };
        let skeleton = self
            .skeleton
            .iter()
            .enumerate()
            .filter_map(|(i, j)| {
                j.parent
                    .map(|p| Limb::new(&format!("{}-{}", self.skeleton[p].name, j.name), p, i))
            })
            .collect();
        MetricConfig {
            metric,
            threshold,
            normalizer,
            joint_names: self.joint_names(),
            skeleton,
            image_size: (self.canvas as Float, self.canvas as Float),
        }
    }

    /// Distance in pixels a blob center keeps from the canvas border.
    pub fn margin(&self) -> Float {
        2.0 * self.blob_sigma
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.skeleton.is_empty() {
            return bad("skeleton has no joints".into());
        }
        for (i, j) in self.skeleton.iter().enumerate() {
            match j.parent {
                None if i != 0 => return bad(format!("joint {i} has no parent; only joint 0 may be the root")),
                Some(p) if p >= i => return bad(format!("joint {i} has parent {p}; parents must come first")),
                _ => {}
            }
        }
        let (lo, hi) = self.body_scale;
        if !(self.blob_sigma > 0.0) || !(lo > 0.0 && lo <= hi) || !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad("invalid blob sigma, body scale or occlusion probability".into());
        }
        if !(self.length_jitter >= 0.0 && self.length_jitter < 1.0) || !(self.noise_amplitude >= 0.0) {
            return bad("invalid length jitter or noise amplitude".into());
        }
        if self.canvas as Float <= 2.0 * self.margin() {
            return Err(Error::InfeasibleGeometry(format!(
                "canvas {} leaves no room for blobs of sigma {}",
                self.canvas, self.blob_sigma
            )));
        }
        Ok(())
    }
}

/// Fully saturated color of joint `j` out of `n`, with evenly spaced hues.
pub fn joint_color(j: usize, n: usize) -> [Float; 3] {
    let h = 6.0 * j as Float / n.max(1) as Float;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    /// Ground truth in normalized canvas coordinates.
    pub pose: Pose,
}

impl SynthSample {
    /// Annotation whose crop is the whole canvas.
    pub fn annotation(&self, image: &str, crop: &CropConfig) -> Annotation {
        let side = self.image.width() as Float;
        Annotation {
            image: image.to_string(),
            joints: self.pose.joints.iter().map(|p| [p[0] * side, p[1] * side]).collect(),
            visibility: self.pose.visibility.clone(),
            center: [side / 2.0, side / 2.0],
            scale: side / crop.pixels_per_scale,
        }
    }
}

const MAX_ATTEMPTS: usize = 1000;

/// Samples joint positions in pixels, rejecting poses that leave the canvas margin.
fn sample_joints(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<[Float; 2]>> {
    let canvas = spec.canvas as Float;
    let margin = spec.margin();
    let jitter = |rng: &mut ChaCha8Rng, r: Float| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    for _ in 0..MAX_ATTEMPTS {
        let root = [rng.gen_range(margin..canvas - margin), rng.gen_range(margin..canvas - margin)];
        let body_angle = jitter(rng, spec.body_rotation).to_radians();
        let (lo, hi) = spec.body_scale;
        let body_scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let mut joints = vec![root; spec.num_joints()];
        for (i, j) in spec.skeleton.iter().enumerate().skip(1) {
            let parent = joints[j.parent.expect("validated")];
            let angle = body_angle + jitter(rng, j.angle_jitter).to_radians();
            let length = body_scale * (1.0 + jitter(rng, spec.length_jitter)) * canvas;
            let (sin, cos) = angle.sin_cos();
            let [ox, oy] = j.offset;
            joints[i] = [
                parent[0] + length * (cos * ox - sin * oy),
                parent[1] + length * (sin * ox + cos * oy),
            ];
        }
        let fits = joints
            .iter()
            .all(|p| p.iter().all(|&c| c >= margin && c <= canvas - margin));
        if fits {
            return Ok(joints);
        }
    }
    Err(Error::InfeasibleGeometry(format!(
        "no pose fits the {}px canvas after {MAX_ATTEMPTS} attempts",
        spec.canvas
    )))
}

/// Gaussian intensity of a blob centered at `center` (pixel coordinates),
/// evaluated at pixel centers; row-major `canvas × canvas`.
pub fn blob_layer(spec: &SyntheticSpec, center: [Float; 2]) -> Vec<Float> {
    let n = spec.canvas;
    let inv = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let dx = x as Float + 0.5 - center[0];
            let dy = y as Float + 0.5 - center[1];
            out[y * n + x] = (-(dx * dx + dy * dy) * inv).exp();
        }
    }
    out
}

fn background(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Image {
    const GRID: usize = 5;
    let n = spec.canvas;
    let amp = spec.noise_amplitude;
    let mut coarse = Image::new(GRID, GRID);
    for y in 0..GRID {
        for x in 0..GRID {
            let rgb = [rng.gen::<Float>(), rng.gen::<Float>(), rng.gen::<Float>()];
            coarse.set_pixel(x, y, rgb);
        }
    }
    let step = (GRID - 1) as Float / (n - 1).max(1) as Float;
    let mut img = coarse.warp(n, n, |u, v| (u as Float * step, v as Float * step));
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                let fine: Float = rng.gen();
                let v = 0.1 + amp * (0.7 * img.get(c, y, x) + 0.3 * fine);
                img.set(c, y, x, v);
            }
        }
    }
    img
}

fn render_sample(spec: &SyntheticSpec, index: usize) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let joints = sample_joints(spec, &mut rng)?;
    let visibility: Vec<bool> = spec
        .skeleton
        .iter()
        .map(|j| !(j.occludable && spec.occlusion_prob > 0.0 && rng.gen::<Float>() < spec.occlusion_prob))
        .collect();
    let mut image = background(spec, &mut rng);
    let n = spec.canvas;
    let nj = spec.num_joints();
    for (j, (&p, &vis)) in joints.iter().zip(&visibility).enumerate() {
        if !vis {
            continue;
        }
        let color = joint_color(j, nj);
        let layer = blob_layer(spec, p);
        for y in 0..n {
            for x in 0..n {
                let g = layer[y * n + x];
                for (c, &col) in color.iter().enumerate() {
                    let v = image.get(c, y, x);
                    image.set(c, y, x, v * (1.0 - g) + col * g);
                }
            }
        }
    }
    let side = n as Float;
    let pose = Pose::truth(joints.iter().map(|p| [p[0] / side, p[1] / side]).collect(), visibility);
    Ok(SynthSample { image, pose })
}

/// Generates samples `0..n`; sample `i` depends only on `(spec, i)`.
pub fn synth_generate(spec: &SyntheticSpec, n: usize) -> Result<Vec<SynthSample>> {
    synth_range(spec, 0, n)
}

/// Generates samples `start..start + n`.
pub fn synth_range(spec: &SyntheticSpec, start: usize, n: usize) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    (start..start + n).into_par_iter().map(|i| render_sample(spec, i)).collect()
}
