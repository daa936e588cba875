//! Joint geometric and photometric augmentation of a patch and its mask.
//!
//! All geometric steps are folded into one affine map from output pixel
//! centres to input coordinates, so every channel and the mask see exactly
//! the same transform. Channels are sampled bilinearly with zero fill; the
//! mask takes the class of the input pixel containing the mapped point, or
//! background outside the input.

use rand::Rng;

use super::{MaskMap, Patch, NUM_CHANNELS};
use crate::error::{Error, Result, ShapeError};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop_p: f64,
    /// Fraction of the input area kept by a crop.
    pub crop_scale: (f64, f64),
    /// Width / height of a crop.
    pub crop_ratio: (f64, f64),
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub rotate_p: f64,
    pub rotate_degrees: (f64, f64),
    pub affine_p: f64,
    /// Maximum translation as a fraction of each side.
    pub translate: f64,
    pub shear_degrees: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub blur_kernel: usize,
    pub blur_channels: Vec<usize>,
    /// (height, width) of the output; the input size when `None`.
    pub output_size: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_p: 0.5,
            crop_scale: (0.5, 1.0),
            crop_ratio: (0.75, 4.0 / 3.0),
            hflip_p: 0.5,
            vflip_p: 0.5,
            rotate_p: 0.5,
            rotate_degrees: (-180.0, 180.0),
            affine_p: 0.5,
            translate: 0.1,
            shear_degrees: 10.0,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            blur_kernel: 5,
            blur_channels: (0..NUM_CHANNELS).collect(),
            output_size: None,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every step disabled.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_p: 0.0,
            hflip_p: 0.0,
            vflip_p: 0.0,
            rotate_p: 0.0,
            affine_p: 0.0,
            blur_p: 0.0,
            ..Default::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        [
            self.crop_p,
            self.hflip_p,
            self.vflip_p,
            self.rotate_p,
            self.affine_p,
            self.blur_p,
        ]
        .iter()
        .all(|&p| p == 0.0)
            && self.output_size.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("crop_p", self.crop_p),
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("rotate_p", self.rotate_p),
            ("affine_p", self.affine_p),
            ("blur_p", self.blur_p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale ({lo}, {hi}) must lie in (0, 1]"
            )));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!("crop ratio ({rlo}, {rhi}) invalid")));
        }
        if !(self.rotate_degrees.0 <= self.rotate_degrees.1) {
            return Err(Error::Config("rotation range is empty".into()));
        }
        if !(0.0..1.0).contains(&self.translate) || !(0.0..90.0).contains(&self.shear_degrees) {
            return Err(Error::Config(
                "translate must be in [0, 1) and shear in [0, 90)".into(),
            ));
        }
        let (slo, shi) = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) || self.blur_kernel % 2 == 0 {
            return Err(Error::Config(
                "blur needs positive sigma and an odd kernel".into(),
            ));
        }
        if let Some(&c) = self.blur_channels.iter().find(|&&c| c >= NUM_CHANNELS) {
            return Err(Error::Config(format!("blur channel {c} out of range")));
        }
        if matches!(self.output_size, Some((0, _)) | Some((_, 0))) {
            return Err(Error::Config("output size must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major 2×3 affine map.
type Affine = [[f64; 3]; 2];

const IDENTITY: Affine = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];

/// `a ∘ b`: apply `b` first.
fn compose(a: &Affine, b: &Affine) -> Affine {
    let mut out = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + if c == 2 { a[r][2] } else { 0.0 };
        }
    }
    out
}

fn apply(m: &Affine, x: f64, y: f64) -> (f64, f64) {
    (
        m[0][0] * x + m[0][1] * y + m[0][2],
        m[1][0] * x + m[1][1] * y + m[1][2],
    )
}

/// Linear part `l` acting about `(cx, cy)`.
fn about(l: [[f64; 2]; 2], cx: f64, cy: f64) -> Affine {
    [
        [l[0][0], l[0][1], cx - l[0][0] * cx - l[0][1] * cy],
        [l[1][0], l[1][1], cy - l[1][0] * cx - l[1][1] * cy],
    ]
}

/// Cosine and sine with exact values at multiples of 90°.
fn cos_sin(degrees: f64) -> (f64, f64) {
    let quarter = degrees / 90.0;
    if quarter == quarter.round() {
        match (quarter as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = degrees.to_radians();
        (r.cos(), r.sin())
    }
}

/// Crop box (x0, y0, w, h) with random area and aspect ratio; the whole
/// input when ten draws fail to fit.
fn crop_box(
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
    h: usize,
    w: usize,
) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (llo, lhi) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let ratio = rng.gen_range(llo..=lhi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            return (rng.gen_range(0..=w - cw), rng.gen_range(0..=h - ch), cw, ch);
        }
    }
    (0, 0, w, h)
}

/// Map from output coordinates to input coordinates for one random draw.
fn draw_transform(
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Affine {
    let (cx, cy) = (ow as f64 / 2.0, oh as f64 / 2.0);
    let (x0, y0, cw, ch) = if rng.gen_bool(cfg.crop_p) {
        crop_box(rng, cfg, h, w)
    } else {
        (0, 0, w, h)
    };
    let resize: Affine = [
        [cw as f64 / ow as f64, 0.0, x0 as f64],
        [0.0, ch as f64 / oh as f64, y0 as f64],
    ];
    let mut m = resize;
    if rng.gen_bool(cfg.hflip_p) {
        m = compose(&m, &[[-1.0, 0.0, ow as f64], [0.0, 1.0, 0.0]]);
    }
    if rng.gen_bool(cfg.vflip_p) {
        m = compose(&m, &[[1.0, 0.0, 0.0], [0.0, -1.0, oh as f64]]);
    }
    if rng.gen_bool(cfg.rotate_p) {
        let (lo, hi) = cfg.rotate_degrees;
        let deg = if lo < hi { rng.gen_range(lo..hi) } else { lo };
        // Inverse rotation.
        let (c, s) = cos_sin(-deg);
        m = compose(&m, &about([[c, -s], [s, c]], cx, cy));
    }
    if rng.gen_bool(cfg.affine_p) {
        let tx = (rng.gen_range(-cfg.translate..=cfg.translate) * ow as f64).round();
        let ty = (rng.gen_range(-cfg.translate..=cfg.translate) * oh as f64).round();
        let k = rng
            .gen_range(-cfg.shear_degrees..=cfg.shear_degrees)
            .to_radians()
            .tan();
        // Forward: shear about the centre, then translate. Inverse undoes both.
        let untranslate: Affine = [[1.0, 0.0, -tx], [0.0, 1.0, -ty]];
        let unshear = about([[1.0, -k], [0.0, 1.0]], cx, cy);
        m = compose(&m, &compose(&unshear, &untranslate));
    }
    m
}

fn warp_channel(
    src: &[f32],
    h: usize,
    w: usize,
    dst: &mut [f32],
    oh: usize,
    ow: usize,
    m: &Affine,
) {
    let tap = |y: i64, x: i64| -> f32 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    for v in 0..oh {
        for u in 0..ow {
            let (x, y) = apply(m, u as f64 + 0.5, v as f64 + 0.5);
            let (sx, sy) = (x - 0.5, y - 0.5);
            let (fx0, fy0) = (sx.floor(), sy.floor());
            let (ax, ay) = ((sx - fx0) as f32, (sy - fy0) as f32);
            let (ix, iy) = (fx0 as i64, fy0 as i64);
            let top = tap(iy, ix) * (1.0 - ax) + if ax > 0.0 { tap(iy, ix + 1) * ax } else { 0.0 };
            let bottom = if ay > 0.0 {
                tap(iy + 1, ix) * (1.0 - ax)
                    + if ax > 0.0 {
                        tap(iy + 1, ix + 1) * ax
                    } else {
                        0.0
                    }
            } else {
                0.0
            };
            dst[v * ow + u] = if ay > 0.0 {
                top * (1.0 - ay) + bottom * ay
            } else {
                top
            };
        }
    }
}

fn warp_mask(src: &MaskMap, dst: &mut [u8], oh: usize, ow: usize, m: &Affine) {
    let (h, w) = (src.height() as i64, src.width() as i64);
    for v in 0..oh {
        for u in 0..ow {
            let (x, y) = apply(m, u as f64 + 0.5, v as f64 + 0.5);
            let (ix, iy) = (x.floor() as i64, y.floor() as i64);
            dst[v * ow + u] = if ix < 0 || iy < 0 || ix >= w || iy >= h {
                0
            } else {
                src.get(iy as usize, ix as usize)
            };
        }
    }
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i.rem_euclid(period);
    (if r < n { r } else { period - r }) as usize
}

/// Separable Gaussian blur with reflected borders.
fn blur(plane: &mut [f32], h: usize, w: usize, kernel: usize, sigma: f64) {
    let r = (kernel / 2) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, &kv)| kv * plane[y * w + reflect(x as i64 + j as i64 - r, w)] as f64)
                .sum::<f64>() as f32;
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, &kv)| kv * tmp[reflect(y as i64 + j as i64 - r, h) * w + x] as f64)
                .sum::<f64>() as f32;
        }
    }
}

/// Apply one random draw of `cfg` to `patch` and `mask` together.
pub fn augment(
    patch: &Patch,
    mask: &MaskMap,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Patch, MaskMap)> {
    cfg.validate()?;
    let (h, w) = (patch.height(), patch.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(ShapeError::Incompatible {
            op: "augment",
            left: vec![h, w],
            right: vec![mask.height(), mask.width()],
        }
        .into());
    }
    let (oh, ow) = cfg.output_size.unwrap_or((h, w));
    let m = draw_transform(rng, cfg, h, w, oh, ow);
    let mut data = vec![0.0f32; NUM_CHANNELS * oh * ow];
    if m == IDENTITY && (oh, ow) == (h, w) {
        data.copy_from_slice(patch.data());
    } else {
        for c in 0..NUM_CHANNELS {
            warp_channel(
                patch.channel(c),
                h,
                w,
                &mut data[c * oh * ow..(c + 1) * oh * ow],
                oh,
                ow,
                &m,
            );
        }
    }
    let mut labels = vec![0u8; oh * ow];
    warp_mask(mask, &mut labels, oh, ow, &m);
    if rng.gen_bool(cfg.blur_p) {
        let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        for &c in &cfg.blur_channels {
            blur(
                &mut data[c * oh * ow..(c + 1) * oh * ow],
                oh,
                ow,
                cfg.blur_kernel,
                sigma,
            );
        }
    }
    Ok((
        Patch::new(patch.id.clone(), oh, ow, data)?,
        MaskMap::new(oh, ow, labels)?,
    ))
}
