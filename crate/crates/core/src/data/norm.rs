//! Per-channel standardization with statistics from the training split.

use super::{Patch, CHANNEL_NAMES, NUM_CHANNELS};
use crate::error::{Error, Result};

/// Standard deviations below this are replaced by it.
pub const STD_FLOOR: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f32; NUM_CHANNELS],
    pub std: [f32; NUM_CHANNELS],
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            mean: [0.0; NUM_CHANNELS],
            std: [1.0; NUM_CHANNELS],
        }
    }

    /// Means followed by standard deviations.
    pub fn to_values(&self) -> Vec<f32> {
        self.mean.iter().chain(&self.std).copied().collect()
    }

    pub fn from_values(v: &[f32]) -> Result<Self> {
        if v.len() != 2 * NUM_CHANNELS {
            return Err(Error::Config(format!(
                "expected {} normalization values, found {}",
                2 * NUM_CHANNELS,
                v.len()
            )));
        }
        if v[NUM_CHANNELS..]
            .iter()
            .any(|&s| !(s > 0.0) || !s.is_finite())
            || v.iter().any(|x| !x.is_finite())
        {
            return Err(Error::Config(
                "normalization values must be finite with positive std".into(),
            ));
        }
        let mut s = Self::identity();
        s.mean.copy_from_slice(&v[..NUM_CHANNELS]);
        s.std.copy_from_slice(&v[NUM_CHANNELS..]);
        Ok(s)
    }
}

/// Mean and population standard deviation of every channel over all pixels
/// of `patches`.
pub fn compute_norm_stats<'a>(patches: impl IntoIterator<Item = &'a Patch>) -> Result<NormStats> {
    let mut sum = [0.0f64; NUM_CHANNELS];
    let mut sq = [0.0f64; NUM_CHANNELS];
    let mut count = 0usize;
    let patches: Vec<&Patch> = patches.into_iter().collect();
    for p in &patches {
        for c in 0..NUM_CHANNELS {
            sum[c] += p.channel(c).iter().map(|&v| v as f64).sum::<f64>();
        }
        count += p.height() * p.width();
    }
    if count == 0 {
        return Err(Error::Config("no training pixels for normalization".into()));
    }
    let mut stats = NormStats::identity();
    for c in 0..NUM_CHANNELS {
        stats.mean[c] = (sum[c] / count as f64) as f32;
    }
    for p in &patches {
        for c in 0..NUM_CHANNELS {
            let m = sum[c] / count as f64;
            sq[c] += p
                .channel(c)
                .iter()
                .map(|&v| (v as f64 - m).powi(2))
                .sum::<f64>();
        }
    }
    for c in 0..NUM_CHANNELS {
        let s = (sq[c] / count as f64).sqrt() as f32;
        if s < STD_FLOOR {
            log::warn!(
                "channel {} is constant over the training split; std floored",
                CHANNEL_NAMES[c]
            );
        }
        stats.std[c] = s.max(STD_FLOOR);
    }
    Ok(stats)
}

pub fn normalize(patch: &Patch, stats: &NormStats) -> Patch {
    let mut out = patch.clone();
    for c in 0..NUM_CHANNELS {
        let (m, s) = (stats.mean[c], stats.std[c]);
        out.channel_mut(c)
            .iter_mut()
            .for_each(|v| *v = (*v - m) / s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizes_and_floors() {
        let n = 4;
        let mut data = vec![0.0f32; NUM_CHANNELS * n];
        data[..n].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        data[n..2 * n].fill(7.0);
        let p = Patch::new("p", 2, 2, data).unwrap();
        let s = compute_norm_stats([&p]).unwrap();
        assert_eq!(s.mean[0], 2.5);
        assert!((s.std[0] - 1.25f32.sqrt()).abs() < 1e-6);
        assert_eq!(s.std[1], STD_FLOOR);
        let q = normalize(&p, &s);
        assert!(q.channel(1).iter().all(|&v| v == 0.0));
        let mean: f32 = q.channel(0).iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert_eq!(NormStats::from_values(&s.to_values()).unwrap(), s);
        assert!(NormStats::from_values(&[0.0; 3]).is_err());
    }
}
