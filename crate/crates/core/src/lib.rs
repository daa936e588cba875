//! Deep semantic model fusion for multi-channel terrain segmentation.
//!
//! Two segmentation networks (a compact U-Net and a DeepLab-style network
//! with atrous spatial pyramid pooling) are trained separately on 11-channel
//! rasters (RGB plus eight terrain derivatives) with a cross-entropy + soft
//! Dice objective. At inference their per-pixel class probabilities are
//! blended as `alpha · unet + (1 − alpha) · deeplab` before the argmax.
//! Everything runs on a small reverse-mode autodiff engine in [`tensor`].

pub mod ablation;
pub mod data;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
