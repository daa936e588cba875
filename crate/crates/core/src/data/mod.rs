//! Input rasters, label masks and everything that produces or transforms them.
//!
//! A [`Patch`] holds the 11 input channels in the order of [`CHANNEL_NAMES`];
//! a [`MaskMap`] holds one class per pixel (0 background, 1 terrace, 2 wall).
//! Datasets on disk are a directory of `<id>.mcr` / `<id>.msk` pairs plus a
//! `manifest.txt` naming each id and its split.

mod augment;
pub mod formats;
mod generate;
mod norm;
mod terrain;

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, FormatError, Result, ShapeError};
use crate::nets::NUM_CLASSES;

pub use augment::{augment, AugmentConfig};
pub use generate::{
    generate_dataset, generate_patch, generate_samples, patch_id, stream_rng, NOISE_CHANNEL,
    WALL_SIGNAL_CHANNEL,
};
pub use norm::{compute_norm_stats, normalize, NormStats, STD_FLOOR};
pub use terrain::{d8_routing, derive_features, TerrainFeatures};

/// Number of input channels: RGB plus eight terrain features.
pub const NUM_CHANNELS: usize = 11;

/// Channel order used by every file, model and report.
pub const CHANNEL_NAMES: [&str; NUM_CHANNELS] = [
    "red", "green", "blue", "aspect", "dtm", "flowacc", "flowdir", "pcurv", "slope", "tcurv", "twi",
];

pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn channel_index(name: &str) -> Option<usize> {
    CHANNEL_NAMES.iter().position(|&c| c == name)
}

/// An 11-channel raster, channel-major (c, h, w).
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub id: String,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Patch {
    pub fn new(id: impl Into<String>, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != NUM_CHANNELS * height * width {
            return Err(ShapeError::Size {
                shape: vec![NUM_CHANNELS, height, width],
                len: data.len(),
            }
            .into());
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite { index }.into());
        }
        Ok(Patch {
            id: id.into(),
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        formats::write_patch(path, self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        formats::read_patch(path)
    }
}

/// Per-pixel class labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(ShapeError::Size {
                shape: vec![height, width],
                len: data.len(),
            }
            .into());
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, &v)| v as usize >= NUM_CLASSES)
        {
            return Err(FormatError::InvalidClass { value, index }.into());
        }
        Ok(MaskMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Result<Self> {
        Self::new(height, width, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    pub fn foreground_fraction(&self) -> f64 {
        let h = self.histogram();
        (h[1] + h[2]) as f64 / self.data.len().max(1) as f64
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        formats::write_mask(path, self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        formats::read_mask(path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// Dataset index: ids in file order with their split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(String, Split)>,
}

impl Manifest {
    /// First 80% of `ids` train, the rest validate (at least one of each
    /// when there are two or more ids).
    pub fn with_split(ids: Vec<String>) -> Self {
        let n = ids.len();
        let mut n_train = (n * 4) / 5;
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        } else {
            n_train = n;
        }
        Manifest {
            entries: ids
                .into_iter()
                .enumerate()
                .map(|(i, id)| {
                    (
                        id,
                        if i < n_train {
                            Split::Train
                        } else {
                            Split::Val
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("version=1\n");
        for (id, split) in &self.entries {
            s.push_str(&format!("{id},{split}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("version=1") => {}
            other => {
                return Err(
                    FormatError::Manifest(format!("expected version=1, found {other:?}")).into(),
                );
            }
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, split) = line
                .split_once(',')
                .ok_or_else(|| FormatError::Manifest(format!("line {}: missing split", n + 2)))?;
            let split = match split {
                "train" => Split::Train,
                "val" => Split::Val,
                other => {
                    return Err(FormatError::Manifest(format!(
                        "line {}: unknown split {other:?}",
                        n + 2
                    ))
                    .into());
                }
            };
            if id.is_empty() || id.contains(['/', '\\']) {
                return Err(FormatError::Manifest(format!("line {}: bad id {id:?}", n + 2)).into());
            }
            entries.push((id.to_string(), split));
        }
        Ok(Manifest { entries })
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::from(e).at(&path))?;
        Self::parse(&text).map_err(|e| e.at(&path))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::from(e).at(path))
    }
}

pub fn patch_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.mcr"))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.msk"))
}

/// A patch paired with its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patch: Patch,
    pub mask: MaskMap,
}

/// Load every sample of `split` listed in the manifest of `dir`.
pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let manifest = Manifest::read(dir)?;
    manifest
        .ids(split)
        .map(|id| {
            let mut patch = Patch::read(patch_path(dir, id))?;
            patch.id = id.to_string();
            let mask = MaskMap::read(mask_path(dir, id))?;
            if mask.height() != patch.height() || mask.width() != patch.width() {
                return Err(ShapeError::Incompatible {
                    op: "load_split",
                    left: vec![patch.height(), patch.width()],
                    right: vec![mask.height(), mask.width()],
                }
                .into());
            }
            Ok(Sample { patch, mask })
        })
        .collect()
}
