//! Cropping and augmentation.
//!
//! Normalized coordinates put the top-left image corner at `(0, 0)` and the
//! bottom-right corner at `(1, 1)`; pixel `(u, v)` covers
//! `[u, u + 1) × [v, v + 1)` in pixel coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Annotation, Image};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    /// Crop side length in pixels per unit of annotation scale.
    pub pixels_per_scale: Float,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig { pixels_per_scale: 200.0 }
    }
}

fn inside_unit_square(p: [Float; 2]) -> bool {
    (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])
}

/// Ground truth of `ann` in the normalized frame of its crop; no image needed.
pub fn normalize_annotation(ann: &Annotation, cfg: &CropConfig) -> Result<Pose> {
    let side = ann.scale * cfg.pixels_per_scale;
    if !(side > 0.0 && side.is_finite()) {
        return Err(Error::Geometry(format!("degenerate crop: side {side}")));
    }
    let left = ann.center[0] - side / 2.0;
    let top = ann.center[1] - side / 2.0;
    let joints: Vec<[Float; 2]> = ann.joints.iter().map(|p| [(p[0] - left) / side, (p[1] - top) / side]).collect();
    let visibility = ann
        .visibility
        .iter()
        .zip(&joints)
        .map(|(&v, &p)| v && inside_unit_square(p))
        .collect();
    Ok(Pose::truth(joints, visibility))
}

/// Crops the square of side `scale × pixels_per_scale` centered on the
/// annotation center, resizes it to `out_size × out_size` and maps joints
/// into the crop's normalized frame. Joints outside the crop become invisible.
pub fn crop_normalize(image: &Image, ann: &Annotation, out_size: usize, cfg: &CropConfig) -> Result<(Tensor, Pose)> {
    if out_size == 0 {
        return Err(Error::Geometry("degenerate crop: output size 0".into()));
    }
    let pose = normalize_annotation(ann, cfg)?;
    let side = ann.scale * cfg.pixels_per_scale;
    let left = ann.center[0] - side / 2.0;
    let top = ann.center[1] - side / 2.0;
    let step = side / out_size as Float;
    let crop = image.warp(out_size, out_size, |u, v| {
        (left + (u as Float + 0.5) * step - 0.5, top + (v as Float + 0.5) * step - 0.5)
    });
    Ok((crop.to_tensor(), pose))
}

/// `p ↦ A·p + t` on normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub a: [[Float; 2]; 2],
    pub t: [Float; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            a: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    /// Rotation by `degrees` and scaling by `scale` about `center`:
    /// `p' = c + s·R(θ)·(p − c)` with `R = [[cos θ, −sin θ], [sin θ, cos θ]]`
    /// acting on (x, y) with y pointing down, so a positive angle turns +x
    /// toward +y: (0.75, 0.5) goes to (0.5, 0.75) at 90° about the center.
    pub fn rotation_scale(degrees: Float, scale: Float, center: [Float; 2]) -> Self {
        let (sin, cos) = degrees.to_radians().sin_cos();
        let a = [[scale * cos, -scale * sin], [scale * sin, scale * cos]];
        let t = [
            center[0] - (a[0][0] * center[0] + a[0][1] * center[1]),
            center[1] - (a[1][0] * center[0] + a[1][1] * center[1]),
        ];
        AffineTransform { a, t }
    }

    pub fn apply(&self, p: [Float; 2]) -> [Float; 2] {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.t[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.t[1],
        ]
    }

    pub fn inverse(&self) -> Result<Self> {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Geometry("singular transform".into()));
        }
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Ok(AffineTransform { a: inv, t })
    }

    /// Warps `image` so that the content at normalized `p` moves to `apply(p)`.
    pub fn warp_image(&self, image: &Image) -> Result<Image> {
        let inv = self.inverse()?;
        let (w, h) = (image.width(), image.height());
        Ok(image.warp(w, h, |u, v| {
            let q = [(u as Float + 0.5) / w as Float, (v as Float + 0.5) / h as Float];
            let p = inv.apply(q);
            (p[0] * w as Float - 0.5, p[1] * h as Float - 0.5)
        }))
    }

    /// Transforms joints; a joint stays visible only if it was visible and
    /// lands inside the frame.
    pub fn warp_pose(&self, pose: &Pose) -> Pose {
        let joints: Vec<[Float; 2]> = pose.joints.iter().map(|&p| self.apply(p)).collect();
        let visibility: Vec<bool> = pose
            .visibility
            .iter()
            .zip(&joints)
            .map(|(&v, &p)| v && inside_unit_square(p))
            .collect();
        let probabilities = pose
            .probabilities
            .iter()
            .zip(&visibility)
            .map(|(&p, &v)| if v { p } else { 0.0 })
            .collect();
        Pose {
            joints,
            probabilities,
            visibility,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// Rotation angle is drawn uniformly from `[-rotation_range, rotation_range]` degrees.
    pub rotation_range: Float,
    /// Scale factor is drawn uniformly from this interval.
    pub scale_range: (Float, Float),
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation_range: 40.0,
            scale_range: (0.7, 1.3),
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.rotation_range >= 0.0 && self.rotation_range.is_finite()) || !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "invalid augmentation ranges: rotation {}, scale {:?}",
                self.rotation_range, self.scale_range
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_range == 0.0 && self.scale_range == (1.0, 1.0)
    }
}

/// Draws the rotation/scale transform about the image center for `params.seed`.
pub fn sample_augmentation(params: &AugmentParams) -> Result<AffineTransform> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let r = params.rotation_range;
    let degrees = if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let (lo, hi) = params.scale_range;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    Ok(AffineTransform::rotation_scale(degrees, scale, [0.5, 0.5]))
}

/// Applies one random rotation and rescaling to both image and pose.
pub fn augment(image: &Image, pose: &Pose, params: &AugmentParams) -> Result<(Image, Pose)> {
    let tf = sample_augmentation(params)?;
    Ok((tf.warp_image(image)?, tf.warp_pose(pose)))
}
