//! Soft-score fusion of two models' class-probability maps.
//!
//! `out = alpha · unet + (1 − alpha) · deeplab`, per pixel and class. A convex
//! combination of normalized maps stays normalized, so the fused map can go
//! straight to [`argmax_map`].

use std::path::Path;

use crate::data::MaskMap;
use crate::error::{Error, FormatError, Result, ShapeError};
use crate::nets::NUM_CLASSES;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    /// Weight of the U-Net probabilities.
    pub alpha: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { alpha: 0.5 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Per-pixel class probabilities, (3, h, w) channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Tolerance on per-pixel sums accepted when reading PRB files.
pub const READ_SUM_TOLERANCE: f32 = 1e-3;

impl ProbMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != NUM_CLASSES * height * width {
            return Err(ShapeError::Size {
                shape: vec![NUM_CLASSES, height, width],
                len: data.len(),
            }
            .into());
        }
        Ok(ProbMap {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Probability of `class` at flat pixel index `i`.
    pub fn get(&self, class: usize, i: usize) -> f32 {
        self.data[class * self.pixels() + i]
    }

    /// First pixel whose probabilities are non-finite, negative, or do not
    /// sum to 1 within `tol`.
    pub fn check_normalized(&self, tol: f32) -> Result<()> {
        let n = self.pixels();
        for i in 0..n {
            let mut sum = 0.0f32;
            for c in 0..NUM_CLASSES {
                let v = self.data[c * n + i];
                if !v.is_finite() || v < 0.0 {
                    return Err(FormatError::NonFinite { index: c * n + i }.into());
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(FormatError::NotNormalized { index: i, sum }.into());
            }
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::data::formats::write_prb(path, self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        crate::data::formats::read_prb(path)
    }
}

pub fn fuse(unet: &ProbMap, deeplab: &ProbMap, cfg: &FusionConfig) -> Result<ProbMap> {
    cfg.validate()?;
    if unet.height != deeplab.height || unet.width != deeplab.width {
        return Err(ShapeError::Incompatible {
            op: "fuse",
            left: vec![unet.height, unet.width],
            right: vec![deeplab.height, deeplab.width],
        }
        .into());
    }
    let a = cfg.alpha as f32;
    let b = (1.0 - cfg.alpha) as f32;
    let data = unet
        .data
        .iter()
        .zip(&deeplab.data)
        .map(|(&u, &d)| a * u + b * d)
        .collect();
    Ok(ProbMap {
        height: unet.height,
        width: unet.width,
        data,
    })
}

/// Per-pixel most probable class; exact ties go to the lowest class index.
pub fn argmax_map(probs: &ProbMap) -> MaskMap {
    let n = probs.pixels();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if probs.data[c * n + i] > probs.data[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    MaskMap::new(probs.height, probs.width, labels).expect("argmax labels are valid classes")
}
