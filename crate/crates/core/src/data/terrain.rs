//! Terrain derivatives of a gridded elevation model (unit cell size).

/// Curvatures are clipped to this magnitude; flat cells otherwise produce
/// unbounded ratios.
const CURVATURE_CLIP: f64 = 5.0;

/// Curvatures are taken on the surface smoothed with this Gaussian sigma
/// (pixels), a wider stencil than the first derivatives use.
pub const CURVATURE_SIGMA: f64 = 2.0;

/// D8 neighbour offsets (dy, dx), indexed by direction code 0..8 starting
/// east and turning clockwise.
pub const D8: [(isize, isize); 8] = [
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
];

#[derive(Clone, Debug, PartialEq)]
pub struct TerrainFeatures {
    /// Degrees in [0, 360).
    pub aspect: Vec<f32>,
    pub flowacc: Vec<f32>,
    /// D8 code of the receiving neighbour, or 8 for pits and flats.
    pub flowdir: Vec<f32>,
    pub pcurv: Vec<f32>,
    /// Degrees.
    pub slope: Vec<f32>,
    pub tcurv: Vec<f32>,
    pub twi: Vec<f32>,
}

fn at(z: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    let y = y.clamp(0, h as isize - 1) as usize;
    let x = x.clamp(0, w as isize - 1) as usize;
    z[y * w + x]
}

/// First derivatives by central differences with clamped borders.
pub fn gradient(z: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(z, h, w, y, x + 1) - at(z, h, w, y, x - 1)) / 2.0;
            gy[i] = (at(z, h, w, y + 1, x) - at(z, h, w, y - 1, x)) / 2.0;
        }
    }
    (gx, gy)
}

/// Separable Gaussian smoothing with clamped borders.
pub fn gaussian_smooth(z: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            tmp[y as usize * w + x as usize] = (-r..=r)
                .map(|j| k[(j + r) as usize] * at(z, h, w, y, x + j))
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] = (-r..=r)
                .map(|j| k[(j + r) as usize] * at(&tmp, h, w, y + j, x))
                .sum();
        }
    }
    out
}

/// Slope in degrees from the gradient magnitude.
pub fn slope_degrees(gx: &[f64], gy: &[f64]) -> Vec<f64> {
    gx.iter()
        .zip(gy)
        .map(|(a, b)| a.hypot(*b).atan().to_degrees())
        .collect()
}

/// Steepest-descent receivers and upslope contributing area (in cells,
/// counting the cell itself).
pub fn d8_routing(z: &[f64], h: usize, w: usize) -> (Vec<u8>, Vec<f64>) {
    let mut dir = vec![8u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut best = 0.0;
            for (code, &(dy, dx)) in D8.iter().enumerate() {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let dist = if dy != 0 && dx != 0 {
                    std::f64::consts::SQRT_2
                } else {
                    1.0
                };
                let drop = (z[i] - z[ny as usize * w + nx as usize]) / dist;
                if drop > best {
                    best = drop;
                    dir[i] = code as u8;
                }
            }
        }
    }
    // Every receiver is strictly lower, so visiting cells from high to low
    // settles each donor before its receiver.
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let mut acc = vec![1.0; h * w];
    for &i in &order {
        let code = dir[i];
        if code < 8 {
            let (dy, dx) = D8[code as usize];
            let j = ((i / w) as isize + dy) as usize * w + ((i % w) as isize + dx) as usize;
            acc[j] += acc[i];
        }
    }
    (dir, acc)
}

/// All derived channels of `z`. `route` is the surface used for the D8
/// direction channel; accumulation always follows `z`.
pub fn derive_features(z: &[f64], route: &[f64], h: usize, w: usize) -> TerrainFeatures {
    let (gx, gy) = gradient(z, h, w);
    let slope = slope_degrees(&gx, &gy);
    let zs = gaussian_smooth(z, h, w, CURVATURE_SIGMA);
    let (sx, sy) = gradient(&zs, h, w);
    let mut aspect = vec![0.0f32; h * w];
    let mut pcurv = vec![0.0f32; h * w];
    let mut tcurv = vec![0.0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (p, q) = (gx[i], gy[i]);
            let a = (-p).atan2(q).to_degrees();
            aspect[i] = if a < 0.0 { a + 360.0 } else { a } as f32;
            let (p, q) = (sx[i], sy[i]);
            let zs_at = |dy: isize, dx: isize| at(&zs, h, w, y + dy, x + dx);
            let c = zs_at(0, 0);
            let r = zs_at(0, 1) - 2.0 * c + zs_at(0, -1);
            let t = zs_at(1, 0) - 2.0 * c + zs_at(-1, 0);
            let s = (zs_at(1, 1) - zs_at(-1, 1) - zs_at(1, -1) + zs_at(-1, -1)) / 4.0;
            let g2 = p * p + q * q;
            if g2 > 1e-12 {
                let prof = (r * p * p + 2.0 * s * p * q + t * q * q) / (g2 * (1.0 + g2).powf(1.5));
                let tang = (r * q * q - 2.0 * s * p * q + t * p * p) / (g2 * (1.0 + g2).sqrt());
                pcurv[i] = prof.clamp(-CURVATURE_CLIP, CURVATURE_CLIP) as f32;
                tcurv[i] = tang.clamp(-CURVATURE_CLIP, CURVATURE_CLIP) as f32;
            }
        }
    }
    let (_, acc) = d8_routing(z, h, w);
    let (dir, _) = d8_routing(route, h, w);
    let twi = acc
        .iter()
        .zip(&slope)
        .map(|(a, s)| (a / s.to_radians().tan().max(0.01)).ln() as f32)
        .collect();
    TerrainFeatures {
        aspect,
        flowacc: acc.iter().map(|&v| v as f32).collect(),
        flowdir: dir.iter().map(|&d| d as f32).collect(),
        pcurv,
        slope: slope.iter().map(|&v| v as f32).collect(),
        tcurv,
        twi,
    }
}
