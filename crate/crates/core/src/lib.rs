//! Generalizable human radiance fields: a feature-conditioned NeRF that
//! renders color together with per-joint heatmaps, plus the synthetic
//! data, training, keypoint extraction and evaluation around it.

pub mod diffmath;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod field;
pub mod ghtf;
pub mod imaging;
pub mod keypoints;
pub mod metrics;
pub mod model;
pub mod rendering;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
