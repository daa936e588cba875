//! Test-time feature importance: zero one input channel, re-evaluate.

use std::fmt::Write as _;

use crate::data::{normalize, Patch, Sample, CHANNEL_NAMES, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::fusion::{argmax_map, fuse, FusionConfig, ProbMap};
use crate::metrics::{parse_kv, ConfusionMatrix};
use crate::trainer::{Checkpoint, Predictor};

/// Copy of `patch` with channel `index` set to zero.
pub fn ablate_channel(patch: &Patch, index: usize) -> Result<Patch> {
    if index >= NUM_CHANNELS {
        return Err(Error::Config(format!(
            "channel index {index} out of range 0..{NUM_CHANNELS}"
        )));
    }
    let mut out = patch.clone();
    out.channel_mut(index).fill(0.0);
    Ok(out)
}

/// Which predictions are scored.
#[derive(Clone, Debug)]
pub enum AblationTarget {
    Fused {
        unet: Checkpoint,
        deeplab: Checkpoint,
        fusion: FusionConfig,
    },
    Single(Checkpoint),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ZeroAt {
    /// Replace raw values with zero, then normalize as usual.
    #[default]
    Raw,
    /// Zero the normalized values, i.e. set the channel to its training mean.
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationConfig {
    pub zero_at: ZeroAt,
    /// Worker threads for the twelve independent passes.
    pub threads: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            zero_at: ZeroAt::Raw,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub baseline: f64,
    /// Foreground IoU with each channel removed, in channel order.
    pub ablated: [f64; NUM_CHANNELS],
}

impl AblationReport {
    /// `baseline − ablated` per channel.
    pub fn importance(&self) -> [f64; NUM_CHANNELS] {
        std::array::from_fn(|c| self.baseline - self.ablated[c])
    }

    /// Channel indices from most to least important; ties keep channel order.
    pub fn ranking(&self) -> Vec<usize> {
        let imp = self.importance();
        let mut idx: Vec<usize> = (0..NUM_CHANNELS).collect();
        idx.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]));
        idx
    }

    /// `baseline=` first, then `ablated.<channel>=` and
    /// `importance.<channel>=` lines, a blank line and an aligned table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "baseline={}", self.baseline);
        let imp = self.importance();
        for (c, name) in CHANNEL_NAMES.iter().enumerate() {
            let _ = writeln!(s, "ablated.{name}={}", self.ablated[c]);
        }
        for (c, name) in CHANNEL_NAMES.iter().enumerate() {
            let _ = writeln!(s, "importance.{name}={}", imp[c]);
        }
        s.push('\n');
        let _ = writeln!(s, "{:<14} {:>8} {:>11}", "removed", "IoU", "importance");
        let _ = writeln!(s, "{:<14} {:>8.3} {:>11}", "(none)", self.baseline, "-");
        for (c, name) in CHANNEL_NAMES.iter().enumerate() {
            let _ = writeln!(s, "{:<14} {:>8.3} {:>11.3}", name, self.ablated[c], imp[c]);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_kv(text);
        let get = |k: &str| -> Result<f64> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("report is missing {k}")))
        };
        let mut ablated = [0.0; NUM_CHANNELS];
        for (c, name) in CHANNEL_NAMES.iter().enumerate() {
            ablated[c] = get(&format!("ablated.{name}"))?;
        }
        Ok(AblationReport {
            baseline: get("baseline")?,
            ablated,
        })
    }
}

/// Predictors for the target, with the fusion weight when there are two.
enum Scorer {
    Fused(Predictor, Predictor, FusionConfig),
    Single(Predictor),
}

impl Scorer {
    fn new(target: &AblationTarget) -> Result<Self> {
        Ok(match target {
            AblationTarget::Fused {
                unet,
                deeplab,
                fusion,
            } => {
                fusion.validate()?;
                Scorer::Fused(
                    Predictor::from_checkpoint(unet)?,
                    Predictor::from_checkpoint(deeplab)?,
                    *fusion,
                )
            }
            AblationTarget::Single(c) => Scorer::Single(Predictor::from_checkpoint(c)?),
        })
    }

    fn probs_one(
        p: &mut Predictor,
        raw: &Patch,
        channel: Option<usize>,
        zero_at: ZeroAt,
    ) -> Result<ProbMap> {
        let raw = match (channel, zero_at) {
            (Some(c), ZeroAt::Raw) => ablate_channel(raw, c)?,
            _ => raw.clone(),
        };
        let mut x = normalize(&raw, &p.norm);
        if let (Some(c), ZeroAt::Normalized) = (channel, zero_at) {
            x = ablate_channel(&x, c)?;
        }
        p.probs_normalized(&x)
    }

    fn probs(&mut self, raw: &Patch, channel: Option<usize>, zero_at: ZeroAt) -> Result<ProbMap> {
        match self {
            Scorer::Fused(u, d, f) => fuse(
                &Self::probs_one(u, raw, channel, zero_at)?,
                &Self::probs_one(d, raw, channel, zero_at)?,
                f,
            ),
            Scorer::Single(p) => Self::probs_one(p, raw, channel, zero_at),
        }
    }
}

/// Micro foreground IoU of the target on `samples`, optionally with one
/// channel removed.
pub fn score(
    target: &AblationTarget,
    samples: &[Sample],
    channel: Option<usize>,
    zero_at: ZeroAt,
) -> Result<f64> {
    let mut scorer = Scorer::new(target)?;
    let mut cm = ConfusionMatrix::new();
    for s in samples {
        let pred = argmax_map(&scorer.probs(&s.patch, channel, zero_at)?);
        cm.accumulate(pred.data(), s.mask.data());
    }
    Ok(cm.foreground_iou())
}

/// Baseline plus one pass per channel. Passes are independent and may run
/// on several threads; results are placed by channel, so the report does not
/// depend on scheduling.
pub fn run_ablation(
    target: &AblationTarget,
    samples: &[Sample],
    cfg: &AblationConfig,
) -> Result<AblationReport> {
    if samples.is_empty() {
        return Err(Error::Config("no validation samples to ablate on".into()));
    }
    let passes: Vec<Option<usize>> = std::iter::once(None)
        .chain((0..NUM_CHANNELS).map(Some))
        .collect();
    let threads = cfg.threads.clamp(1, passes.len());
    let mut results: Vec<Option<Result<f64>>> = (0..passes.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, &pass) in results.iter_mut().zip(&passes) {
            *slot = Some(score(target, samples, pass, cfg.zero_at));
        }
    } else {
        std::thread::scope(|scope| {
            let chunk = passes.len().div_ceil(threads);
            for (slots, work) in results.chunks_mut(chunk).zip(passes.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, &pass) in slots.iter_mut().zip(work) {
                        *slot = Some(score(target, samples, pass, cfg.zero_at));
                    }
                });
            }
        });
    }
    let values: Vec<f64> = results
        .into_iter()
        .map(|r| r.expect("every pass ran"))
        .collect::<Result<_>>()?;
    Ok(AblationReport {
        baseline: values[0],
        ablated: std::array::from_fn(|c| values[c + 1]),
    })
}
