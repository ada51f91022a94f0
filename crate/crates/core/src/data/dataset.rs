use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{crop_normalize, load_annotations, CropConfig, Image, SynthSample};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::Pose;

/// Preprocessed samples: `3×S×S` images with normalized ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub poses: Vec<Pose>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, poses: Vec<Pose>) -> Result<Self> {
        if images.len() != poses.len() {
            return Err(Error::Config(format!("{} images but {} poses", images.len(), poses.len())));
        }
        if let (Some(img), Some(pose)) = (images.first(), poses.first()) {
            let shape = img.shape().to_vec();
            if !matches!(*shape, [3, h, w] if h == w) {
                return Err(Error::shape("dataset", format!("images must be 3xSxS, got {shape:?}")));
            }
            if let Some(bad) = images.iter().find(|t| t.shape() != shape) {
                return Err(Error::shape("dataset", format!("mixed image shapes {shape:?} and {:?}", bad.shape())));
            }
            let nj = pose.num_joints();
            if let Some(p) = poses.iter().find(|p| p.num_joints() != nj || p.visibility.len() != nj) {
                return Err(Error::JointCount {
                    expected: nj,
                    got: p.num_joints(),
                });
            }
        }
        Ok(Dataset { images, poses })
    }

    pub fn from_synth(samples: Vec<SynthSample>) -> Self {
        let (images, poses) = samples.into_iter().map(|s| (s.image.to_tensor(), s.pose)).unzip();
        Dataset { images, poses }
    }

    /// Loads an annotation file and crops every image to `out_size`.
    pub fn from_annotations(path: &Path, out_size: usize, crop: &CropConfig) -> Result<Self> {
        let anns = load_annotations(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let samples: Vec<(Tensor, Pose)> = anns
            .par_iter()
            .map(|a| {
                let img = Image::load_png(&a.image_path(base))?;
                crop_normalize(&img, a, out_size, crop)
            })
            .collect::<Result<_>>()?;
        let (images, poses) = samples.into_iter().unzip();
        Dataset::new(images, poses)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.images.first().map(|t| t.shape()[1])
    }

    pub fn num_joints(&self) -> Option<usize> {
        self.poses.first().map(Pose::num_joints)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            poses: indices.iter().map(|&i| self.poses[i].clone()).collect(),
        }
    }

    /// Stacks the images at `indices` into an `N×3×S×S` batch.
    pub fn batch_images(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        Tensor::stack(&items)
    }

    /// Splits off a validation set of `round(len × fraction)` samples chosen
    /// by a seeded shuffle; both parts keep their original order.
    pub fn split(&self, fraction: Float, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("validation fraction {fraction} must be in [0, 1)")));
        }
        let n_val = (self.len() as Float * fraction).round() as usize;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut val: Vec<usize> = order[..n_val].to_vec();
        let mut train: Vec<usize> = order[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Ok((self.subset(&train), self.subset(&val)))
    }
}
