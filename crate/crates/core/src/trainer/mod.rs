//! Training loop, validation and inference for one network.

mod checkpoint;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

pub use checkpoint::{timestamp, Checkpoint, MAGIC as CHECKPOINT_MAGIC};

use crate::data::{
    augment, compute_norm_stats, normalize, stream_rng, AugmentConfig, NormStats, Patch, Sample,
};
use crate::error::{Error, Result, ShapeError};
use crate::fusion::ProbMap;
use crate::losses::{total_loss, LossConfig};
use crate::metrics::ConfusionMatrix;
use crate::nets::{EncoderConfig, Model, ModelKind, SegmentationNet, NUM_CLASSES};
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor};

/// RNG stream used for batch order; augmentation draws from its own.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474d;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta: f64,
    pub seed: u64,
    /// Training crops are resampled to this side when set.
    pub patch_size: Option<usize>,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: ModelKind::UNet,
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: AdamWConfig::default().weight_decay,
            beta: 0.5,
            seed: 0,
            patch_size: None,
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "lr and weight decay must be finite and non-negative".into(),
            ));
        }
        self.loss().validate()?;
        self.augment.validate()?;
        self.encoder.validate()
    }

    fn loss(&self) -> LossConfig {
        LossConfig {
            beta: self.beta,
            ..Default::default()
        }
    }

    fn augment_config(&self) -> AugmentConfig {
        let mut a = self.augment.clone();
        if let Some(s) = self.patch_size {
            a.output_size = Some((s, s));
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean batch loss.
    pub train_loss: f64,
    /// Foreground IoU on the validation split, when there is one.
    pub val_iou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the highest validation IoU (earliest on ties);
    /// the final weights when there is no validation split.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Stack patches into an (n, c, h, w) tensor and concatenate their masks.
fn to_batch<'a>(
    samples: impl IntoIterator<Item = (&'a Patch, &'a [u8])>,
) -> Result<(Tensor<f32>, Vec<u8>)> {
    let mut data = Vec::new();
    let mut target = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut n = 0;
    for (p, m) in samples {
        let d = (p.height(), p.width());
        if *dims.get_or_insert(d) != d {
            return Err(ShapeError::Incompatible {
                op: "batch",
                left: vec![dims.unwrap().0, dims.unwrap().1],
                right: vec![d.0, d.1],
            }
            .into());
        }
        data.extend_from_slice(p.data());
        target.extend_from_slice(m);
        n += 1;
    }
    let (h, w) = dims.unwrap_or((0, 0));
    Ok((
        Tensor::new([n, crate::data::NUM_CHANNELS, h, w], data)?,
        target,
    ))
}

fn softmax_probs(logits: &Tensor<f32>) -> Result<ProbMap> {
    let [n, c, h, w] = logits.dims4("softmax")?;
    debug_assert_eq!((n, c), (1, NUM_CLASSES));
    let p = crate::tensor::softmax_channels_raw(logits, n, c, h * w);
    ProbMap::new(h, w, p.into_data())
}

/// A network with the normalization it was trained under, ready for
/// inference.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub model: Model<f32>,
    pub norm: NormStats,
}

impl Predictor {
    pub fn new(model: Model<f32>, norm: NormStats) -> Self {
        Predictor { model, norm }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Predictor::new(ckpt.model()?, ckpt.norm.clone()))
    }

    fn check_channels(&self) -> Result<()> {
        let want = self.model.encoder().in_channels;
        if want != crate::data::NUM_CHANNELS {
            return Err(ShapeError::Axis {
                op: "predict",
                axis: "channel",
                left: crate::data::NUM_CHANNELS,
                right: want,
            }
            .into());
        }
        Ok(())
    }

    /// Class probabilities of an already normalized patch.
    pub fn probs_normalized(&mut self, patch: &Patch) -> Result<ProbMap> {
        self.check_channels()?;
        let (x, _) = to_batch([(patch, &[][..])])?;
        softmax_probs(&self.model.infer(&x)?)
    }

    /// Class probabilities of a raw patch.
    pub fn probs(&mut self, patch: &Patch) -> Result<ProbMap> {
        self.probs_normalized(&normalize(patch, &self.norm))
    }
}

/// Eval-mode probabilities for a raw patch under `ckpt`.
pub fn predict(ckpt: &Checkpoint, patch: &Patch) -> Result<ProbMap> {
    Predictor::from_checkpoint(ckpt)?.probs(patch)
}

/// Pixel confusion of `model` over normalized `samples`, one patch at a time.
/// Validation inputs are never augmented.
fn validate(
    model: &mut Model<f32>,
    samples: &[Sample],
    aug: &AugmentConfig,
) -> Result<ConfusionMatrix> {
    assert!(aug.is_identity(), "validation must not augment");
    let mut cm = ConfusionMatrix::new();
    for s in samples {
        let (x, _) = to_batch([(&s.patch, s.mask.data())])?;
        let probs = softmax_probs(&model.infer(&x)?)?;
        cm.accumulate(crate::fusion::argmax_map(&probs).data(), s.mask.data());
    }
    Ok(cm)
}

/// Train one network on `train`, validating on `val` after each epoch.
pub fn train(cfg: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let norm = compute_norm_stats(train.iter().map(|s| &s.patch))?;
    let norm_set = |set: &[Sample]| -> Vec<Sample> {
        set.iter()
            .map(|s| Sample {
                patch: normalize(&s.patch, &norm),
                mask: s.mask.clone(),
            })
            .collect()
    };
    let train_n = norm_set(train);
    let val_n = norm_set(val);

    let mut model = Model::<f32>::build(cfg.kind, &cfg.encoder, cfg.seed)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let aug = cfg.augment_config();
    let augmenting = !aug.is_identity();
    let mut shuffle_rng = stream_rng(cfg.seed, SHUFFLE_STREAM);
    let mut aug_rng = stream_rng(cfg.seed, AUGMENT_STREAM);
    let loss_cfg = cfg.loss();

    let snapshot = |model: &Model<f32>, epoch: usize| Checkpoint {
        kind: cfg.kind,
        encoder: cfg.encoder.clone(),
        seed: cfg.seed,
        epoch,
        norm: norm.clone(),
        beta: cfg.beta,
        created: None,
        params: model.params().clone(),
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train_n.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<Sample> = if augmenting {
                chunk
                    .iter()
                    .map(|&i| {
                        let s = &train_n[i];
                        augment(&s.patch, &s.mask, &aug, &mut aug_rng)
                            .map(|(patch, mask)| Sample { patch, mask })
                    })
                    .collect::<Result<_>>()?
            } else {
                chunk.iter().map(|&i| train_n[i].clone()).collect()
            };
            let (x, target) = to_batch(items.iter().map(|s| (&s.patch, s.mask.data())))?;

            let tape = Tape::new();
            let bound = model.params().bind(&tape, true);
            let logits = model.forward(&bound, tape.constant(x), true)?;
            let loss = total_loss(&logits, &target, &loss_cfg)?;
            let value = loss.item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    loss: value,
                });
            }
            let mut grads = tape.backward(loss);
            let named: BTreeMap<String, Tensor<f32>> = bound
                .iter()
                .filter_map(|(name, var)| grads.take(var).map(|g| (name.to_string(), g)))
                .collect();
            opt.step(model.params_mut().trainable_mut(), &named)?;
            loss_sum += value;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val_iou = if val_n.is_empty() {
            None
        } else {
            Some(validate(&mut model, &val_n, &AugmentConfig::identity())?.foreground_iou())
        };
        log::info!(
            "{} epoch {epoch}/{}: loss {train_loss:.5}{}",
            cfg.kind,
            cfg.epochs,
            val_iou
                .map(|v| format!(", val IoU {v:.4}"))
                .unwrap_or_default()
        );
        if let Some(iou) = val_iou {
            if best.as_ref().map_or(true, |(b, _)| iou > *b) {
                best = Some((iou, snapshot(&model, epoch)));
            }
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_iou,
        });
    }
    let last = snapshot(&model, cfg.epochs);
    Ok(TrainOutcome {
        best: best.map(|(_, c)| c).unwrap_or_else(|| last.clone()),
        last,
        history,
    })
}

/// Foreground IoU (micro-aggregated) of `ckpt` on raw `samples`.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let mut p = Predictor::from_checkpoint(ckpt)?;
    let normed: Vec<Sample> = samples
        .iter()
        .map(|s| Sample {
            patch: normalize(&s.patch, &p.norm),
            mask: s.mask.clone(),
        })
        .collect();
    validate(&mut p.model, &normed, &AugmentConfig::identity())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_samples;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            encoder: EncoderConfig {
                stage_widths: vec![4, 4, 4, 4],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn one_epoch_is_deterministic() {
        let data = generate_samples(4, 32, 0).unwrap();
        let a = train(&tiny_cfg(), &data[..3], &data[3..]).unwrap();
        let b = train(&tiny_cfg(), &data[..3], &data[3..]).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best.canonical_bytes(), b.best.canonical_bytes());
        assert_eq!(a.history.len(), 1);
        assert!(a.history[0].val_iou.is_some());
    }

    #[test]
    fn zero_lr_changes_only_running_stats() {
        let data = generate_samples(2, 32, 1).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            kind: ModelKind::DeepLab,
            ..tiny_cfg()
        };
        let out = train(&cfg, &data, &[]).unwrap();
        let init = Model::<f32>::build(cfg.kind, &cfg.encoder, cfg.seed).unwrap();
        let mut running_changed = false;
        for (name, p) in init.params().iter() {
            let after = out.last.params.get(name).unwrap();
            if p.trainable {
                assert_eq!(after, &p.tensor, "{name}");
            } else if after != &p.tensor {
                running_changed = true;
            }
        }
        assert!(running_changed);
    }

    #[test]
    fn predict_outputs_normalized_probabilities() {
        let data = generate_samples(2, 32, 2).unwrap();
        let out = train(&tiny_cfg(), &data, &[]).unwrap();
        let zero = Patch::new("z", 32, 32, vec![0.0; 11 * 32 * 32]).unwrap();
        for patch in [&data[0].patch, &zero] {
            let p = predict(&out.last, patch).unwrap();
            p.check_normalized(1e-6).unwrap();
            assert_eq!(predict(&out.last, patch).unwrap(), p);
        }
        let odd = Patch::new("o", 24, 24, vec![0.0; 11 * 24 * 24]).unwrap();
        assert!(matches!(
            predict(&out.last, &odd),
            Err(Error::Indivisible { .. })
        ));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..tiny_cfg()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            beta: 2.0,
            ..tiny_cfg()
        }
        .validate()
        .is_err());
    }
}
