//! Images, annotations, geometric preprocessing and synthetic data.

mod annotation;
mod dataset;
mod image;
mod synth;
mod transform;

pub use annotation::{load_annotations, parse_annotations, write_annotations, Annotation};
pub use dataset::Dataset;
pub use image::Image;
pub use synth::{
    blob_layer, joint_color, synth_generate, synth_range, SkeletonJoint, SynthSample, SyntheticSpec, SYNTH_JOINT_NAMES,
};
pub use transform::{augment, crop_normalize, normalize_annotation, sample_augmentation, AffineTransform, AugmentParams, CropConfig};
