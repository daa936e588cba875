//! Deterministic synthetic terraced-wadi patches.
//!
//! Each patch is a random smooth surface cut by a sloped wadi. Terraces are
//! bands across the wadi floor, flattened up to the crest of a 2 px stone
//! wall on their downstream edge. Walls are raised into the elevation model
//! before any derivative is taken, so their strongest trace is in the slope
//! channel. RGB is a textured hillshade of the landform before the walls
//! were built, with exposure and colour balance varying per patch; walls
//! show in it only as a slight lightening.
//!
//! The flow-direction channel holds D8 codes routed over an independent
//! Gaussian surface and carries no information about the landform or labels.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::terrain::{derive_features, gradient};
use super::{mask_path, patch_path, Manifest, MaskMap, Patch, Sample, NUM_CHANNELS};
use crate::error::{Error, Result};

/// Index of the channel built to carry no label information.
pub const NOISE_CHANNEL: usize = 6;
/// Index of the channel carrying the strongest wall signal.
pub const WALL_SIGNAL_CHANNEL: usize = 8;

const BACKGROUND: u8 = 0;
const TERRACE: u8 = 1;
const WALL: u8 = 2;

/// Independent RNG stream for item `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Bump {
    cx: f64,
    cy: f64,
    amp: f64,
    cos: f64,
    sin: f64,
    sa: f64,
    sb: f64,
}

impl Bump {
    fn at(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let a = (dx * self.cos + dy * self.sin) / self.sa;
        let b = (-dx * self.sin + dy * self.cos) / self.sb;
        self.amp * (-0.5 * (a * a + b * b)).exp()
    }
}

struct Wadi {
    cx: f64,
    cy: f64,
    ux: f64,
    uy: f64,
    gradient: f64,
    depth: f64,
    sigma: f64,
    meander_amp: f64,
    meander_len: f64,
    meander_phase: f64,
}

impl Wadi {
    /// (along, across) coordinates; `across` follows the meandering centreline.
    fn frame(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let s = dx * self.ux + dy * self.uy;
        let d = -dx * self.uy + dy * self.ux;
        let centre = self.meander_amp
            * (std::f64::consts::TAU * s / self.meander_len + self.meander_phase).sin();
        (s, d - centre)
    }

    fn floor(&self, s: f64) -> f64 {
        self.gradient * s
    }

    fn elevation(&self, s: f64, d: f64) -> f64 {
        self.floor(s) + self.depth * (1.0 - (-0.5 * (d / self.sigma).powi(2)).exp())
    }
}

struct Band {
    /// Along-wadi position of the downstream wall face.
    start: f64,
    length: f64,
    half_width: f64,
    wall_height: f64,
}

/// One patch of side `size` from the stream `(seed, index)`.
pub fn generate_patch(id: &str, size: usize, seed: u64, index: u64) -> Result<Sample> {
    if size < 16 || size % 16 != 0 {
        return Err(Error::Config(format!(
            "patch size {size} must be a positive multiple of 16"
        )));
    }
    let mut rng = stream_rng(seed, index);
    let sf = size as f64;
    let n = size * size;

    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let wadi = Wadi {
        cx: sf / 2.0 + rng.gen_range(-sf / 10.0..sf / 10.0),
        cy: sf / 2.0 + rng.gen_range(-sf / 10.0..sf / 10.0),
        ux: theta.cos(),
        uy: theta.sin(),
        gradient: rng.gen_range(0.05..0.09),
        depth: rng.gen_range(2.0..4.0),
        sigma: 0.0,
        meander_amp: rng.gen_range(0.0..0.05 * sf),
        meander_len: rng.gen_range(0.6 * sf..1.2 * sf),
        meander_phase: rng.gen_range(0.0..std::f64::consts::TAU),
    };
    let floor_half_width = rng.gen_range(0.09 * sf..0.14 * sf);
    let wadi = Wadi {
        sigma: 1.5 * floor_half_width,
        ..wadi
    };

    let n_bumps = rng.gen_range(4..8);
    let bumps: Vec<Bump> = (0..n_bumps)
        .map(|_| {
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Bump {
                cx: rng.gen_range(-0.2 * sf..1.2 * sf),
                cy: rng.gen_range(-0.2 * sf..1.2 * sf),
                amp: rng.gen_range(-1.5..1.5),
                cos: phi.cos(),
                sin: phi.sin(),
                sa: rng.gen_range(0.1 * sf..0.3 * sf),
                sb: rng.gen_range(0.1 * sf..0.3 * sf),
            }
        })
        .collect();

    let n_bands = (size / 32).max(2) + rng.gen_range(0..2);
    let span = 0.7 * sf;
    let slot = span / n_bands as f64;
    let bands: Vec<Band> = (0..n_bands)
        .map(|k| {
            let length = rng.gen_range(0.08 * sf..0.13 * sf);
            let lo = -span / 2.0 + k as f64 * slot;
            let free = (slot - length - 2.0).max(0.0);
            Band {
                start: lo + rng.gen_range(0.0..=free) + 2.0,
                length,
                half_width: floor_half_width * rng.gen_range(0.85..1.1),
                wall_height: rng.gen_range(1.0..1.6),
            }
        })
        .collect();
    let offset = rng.gen_range(300.0..500.0);

    let mut base = vec![0.0f64; n];
    let mut z = vec![0.0f64; n];
    let mut labels = vec![BACKGROUND; n];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (s, d) = wadi.frame(px, py);
            let b0 = wadi.elevation(s, d) + bumps.iter().map(|b| b.at(px, py)).sum::<f64>();
            let micro = 0.03 * rng.sample::<f64, _>(StandardNormal);
            base[i] = b0;
            let mut zi = b0 + micro;
            for band in &bands {
                if d.abs() > band.half_width {
                    continue;
                }
                let crest = wadi.floor(band.start) + band.wall_height;
                let fill = crest - 0.2 * band.wall_height;
                if s > band.start - 2.0 && s <= band.start {
                    zi = zi.max(crest + micro);
                    labels[i] = WALL;
                } else if s > band.start && s <= band.start + band.length {
                    zi = zi.max(fill + micro);
                    if labels[i] != WALL {
                        labels[i] = TERRACE;
                    }
                }
            }
            z[i] = zi;
        }
    }

    let route: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let feats = derive_features(&z, &route, size, size);

    let n_shrubs = rng.gen_range(3..8);
    let shrubs: Vec<(f64, f64, f64)> = (0..n_shrubs)
        .map(|_| {
            (
                rng.gen_range(0.0..sf),
                rng.gen_range(0.0..sf),
                rng.gen_range(1.0..2.5),
            )
        })
        .collect();
    let albedo_field: Vec<Bump> = (0..8)
        .map(|_| Bump {
            cx: rng.gen_range(0.0..sf),
            cy: rng.gen_range(0.0..sf),
            amp: rng.gen_range(-1.0..1.0),
            cos: 1.0,
            sin: 0.0,
            sa: rng.gen_range(0.08 * sf..0.25 * sf),
            sb: rng.gen_range(0.08 * sf..0.25 * sf),
        })
        .collect();
    // Exposure and colour balance differ from flight to flight.
    let brightness = rng.gen_range(0.6..1.4);
    let soil = [0.58, 0.48, 0.36].map(|v| v * brightness * rng.gen_range(0.8..1.2));

    // Illumination follows the landform without the walls and terrace fill;
    // walls show only through a weak tint.
    let (gx, gy) = gradient(&base, size, size);
    let (zen, azi) = (45f64.to_radians(), 315f64.to_radians());
    let mut rgb = vec![0.0f32; 3 * n];
    for i in 0..n {
        let slope = gx[i].hypot(gy[i]).atan();
        let aspect = (-gx[i]).atan2(gy[i]);
        let shade =
            (zen.cos() * slope.cos() + zen.sin() * slope.sin() * (azi - aspect).cos()).max(0.0);
        let (px, py) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
        let albedo = (0.4 * albedo_field.iter().map(|b| b.at(px, py)).sum::<f64>()).exp();
        let texture = (0.15 * rng.sample::<f64, _>(StandardNormal)).exp();
        let in_shrub = |ox: f64, oy: f64| {
            shrubs
                .iter()
                .any(|&(sx, sy, r)| (px - ox - sx).hypot(py - oy - sy) <= r)
        };
        let shadow = if in_shrub(1.0, 1.0) && !in_shrub(0.0, 0.0) {
            0.6
        } else {
            1.0
        };
        let light = (0.3 + 0.7 * shade) * albedo * texture * shadow;
        let mut c = soil.map(|v| v * light);
        match labels[i] {
            WALL => c.iter_mut().for_each(|v| *v += 0.015),
            _ if in_shrub(0.0, 0.0) => c[1] += 0.06,
            _ => {}
        }
        for (ch, v) in c.iter().enumerate() {
            rgb[ch * n + i] = v.clamp(0.0, 1.0) as f32;
        }
    }

    let mut data = Vec::with_capacity(NUM_CHANNELS * n);
    data.extend_from_slice(&rgb);
    data.extend_from_slice(&feats.aspect);
    data.extend(z.iter().map(|&v| (v + offset) as f32));
    data.extend_from_slice(&feats.flowacc);
    data.extend_from_slice(&feats.flowdir);
    data.extend_from_slice(&feats.pcurv);
    data.extend_from_slice(&feats.slope);
    data.extend_from_slice(&feats.tcurv);
    data.extend_from_slice(&feats.twi);
    Ok(Sample {
        patch: Patch::new(id, size, size, data)?,
        mask: MaskMap::new(size, size, labels)?,
    })
}

pub fn patch_id(index: usize) -> String {
    format!("patch_{index:04}")
}

/// Generate `n` patches in memory.
pub fn generate_samples(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| generate_patch(&patch_id(i), size, seed, i as u64))
        .collect()
}

/// Write `n` patch/mask pairs and the manifest into `out_dir`.
pub fn generate_dataset(
    n: usize,
    size: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Config("need at least one patch".into()));
    }
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))?;
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let id = patch_id(i);
        let sample = generate_patch(&id, size, seed, i as u64)?;
        sample.patch.write(patch_path(dir, &id))?;
        sample.mask.write(mask_path(dir, &id))?;
        ids.push(id);
    }
    let manifest = Manifest::with_split(ids);
    manifest.write(dir)?;
    Ok(manifest)
}
