//! Differentiable human-pose keypoint regression.
//!
//! Heat maps are turned into coordinates by a spatial softmax followed by
//! an expectation over normalized ramps (soft-argmax), so a convolutional
//! network can be trained end to end on joint coordinates alone.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod render;
pub mod nn;
pub mod softargmax;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};

pub use model::{aggregate, Model, ModelConfig, Pose, PredictionSet};
