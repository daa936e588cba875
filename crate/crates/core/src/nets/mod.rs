//! The two segmentation networks that get fused: a compact U-Net and a
//! DeepLab-style network with an atrous spatial pyramid pooling head.
//!
//! Both share the same four-stage scratch encoder (3×3 conv, batchnorm, ReLU
//! blocks; max-pool downsampling) and emit 3-class logits at input
//! resolution. Parameters live in a [`ParamStore`] under stable dotted names,
//! which is also what checkpoints address.

mod deeplab;
mod params;
mod unet;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{ConvOpts, Scalar, Tape, Tensor, Var};

pub use deeplab::{DeepLabLiteModel, DEFAULT_ASPP_RATES};
pub use params::{Bound, Param, ParamStore};
pub use unet::UNetModel;

pub(crate) use params::Layout;

/// Number of output classes: background, terrace, wall.
pub const NUM_CLASSES: usize = 3;

const BN_MOMENTUM: f64 = 0.9;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: crate::data::NUM_CHANNELS,
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != 4 {
            return Err(Error::Config(format!(
                "encoder needs exactly 4 stage widths, got {}",
                self.stage_widths.len()
            )));
        }
        if self.in_channels == 0 || self.blocks_per_stage == 0 || self.stage_widths.contains(&0) {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    UNet,
    DeepLab,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::UNet => "unet",
            ModelKind::DeepLab => "deeplab",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(ModelKind::UNet),
            "deeplab" => Ok(ModelKind::DeepLab),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Common surface of both networks.
pub trait SegmentationNet<T: Scalar> {
    fn kind(&self) -> ModelKind;

    fn encoder(&self) -> &EncoderConfig;

    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Input height and width must be multiples of this.
    fn required_multiple(&self) -> usize;

    /// Logits (n, 3, h, w) for an (n, in_channels, h, w) batch. In training
    /// mode batchnorm uses batch statistics and updates its running ones.
    fn forward<'t>(
        &mut self,
        bound: &Bound<'t, T>,
        input: Var<'t, T>,
        training: bool,
    ) -> Result<Var<'t, T>>;

    /// Eval-mode logits without gradient bookkeeping.
    fn infer(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params().bind(&tape, false);
        let x = tape.constant(input.clone());
        let logits = self.forward(&bound, x, false)?;
        Ok((*logits.value()).clone())
    }
}

/// Either network, for code that handles checkpoints of both kinds.
#[derive(Clone, Debug, PartialEq)]
pub enum Model<T: Scalar = f32> {
    UNet(UNetModel<T>),
    DeepLab(DeepLabLiteModel<T>),
}

impl<T: Scalar> Model<T> {
    pub fn build(kind: ModelKind, cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        Ok(match kind {
            ModelKind::UNet => Model::UNet(build_unet(cfg, seed)?),
            ModelKind::DeepLab => Model::DeepLab(build_deeplab_lite(cfg, seed)?),
        })
    }

    /// Rebuild the architecture and replace its tensors with `params`. Every
    /// expected name must be present with the expected shape, and no extras.
    pub fn from_params(
        kind: ModelKind,
        cfg: &EncoderConfig,
        params: ParamStore<T>,
    ) -> Result<Self> {
        let mut model = Self::build(kind, cfg, 0)?;
        let store = model.params();
        for (name, p) in store.iter() {
            let got = params.get(name)?;
            if got.shape() != p.tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, architecture expects {:?}",
                    got.shape(),
                    p.tensor.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !store.contains(n)) {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        *model.params_mut() = params;
        Ok(model)
    }

    /// The same network in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        match self {
            Model::UNet(m) => Model::UNet(UNetModel {
                cfg: m.cfg.clone(),
                params: m.params.cast(),
            }),
            Model::DeepLab(m) => Model::DeepLab(DeepLabLiteModel {
                cfg: m.cfg.clone(),
                rates: m.rates,
                params: m.params.cast(),
            }),
        }
    }
}

impl<T: Scalar> SegmentationNet<T> for Model<T> {
    fn kind(&self) -> ModelKind {
        match self {
            Model::UNet(m) => m.kind(),
            Model::DeepLab(m) => m.kind(),
        }
    }

    fn encoder(&self) -> &EncoderConfig {
        match self {
            Model::UNet(m) => m.encoder(),
            Model::DeepLab(m) => m.encoder(),
        }
    }

    fn params(&self) -> &ParamStore<T> {
        match self {
            Model::UNet(m) => m.params(),
            Model::DeepLab(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Model::UNet(m) => m.params_mut(),
            Model::DeepLab(m) => m.params_mut(),
        }
    }

    fn required_multiple(&self) -> usize {
        match self {
            Model::UNet(m) => m.required_multiple(),
            Model::DeepLab(m) => m.required_multiple(),
        }
    }

    fn forward<'t>(
        &mut self,
        bound: &Bound<'t, T>,
        input: Var<'t, T>,
        training: bool,
    ) -> Result<Var<'t, T>> {
        match self {
            Model::UNet(m) => m.forward(bound, input, training),
            Model::DeepLab(m) => m.forward(bound, input, training),
        }
    }
}

pub fn build_unet<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> Result<UNetModel<T>> {
    UNetModel::new(cfg, seed)
}

pub fn build_deeplab_lite<T: Scalar>(
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<DeepLabLiteModel<T>> {
    DeepLabLiteModel::new(cfg, DEFAULT_ASPP_RATES, seed)
}

/// Check channel count and spatial divisibility of a network input.
pub(crate) fn check_input(shape: &[usize], in_channels: usize, multiple: usize) -> Result<()> {
    let &[_, c, h, w] = shape else {
        return Err(crate::error::ShapeError::Rank {
            op: "forward",
            expected: 4,
            got: shape.to_vec(),
        }
        .into());
    };
    if c != in_channels {
        return Err(crate::error::ShapeError::Axis {
            op: "forward",
            axis: "input channel",
            left: c,
            right: in_channels,
        }
        .into());
    }
    if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
        return Err(Error::Indivisible {
            height: h,
            width: w,
            multiple,
        });
    }
    Ok(())
}

pub(crate) fn declare_encoder(layout: &mut Layout, cfg: &EncoderConfig) {
    let w = &cfg.stage_widths;
    layout.conv("enc.stem.conv", cfg.in_channels, w[0], 3, false);
    layout.batch_norm("enc.stem.bn", w[0]);
    let mut prev = w[0];
    for (k, &width) in w.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            let name = format!("enc.stage{k}.block{b}");
            layout.conv(&format!("{name}.conv"), prev, width, 3, false);
            layout.batch_norm(&format!("{name}.bn"), width);
            prev = width;
        }
    }
}

/// Applies named layers during one forward pass.
pub(crate) struct Layers<'a, 't, T: Scalar> {
    pub bound: &'a Bound<'t, T>,
    pub store: &'a mut ParamStore<T>,
    pub training: bool,
}

impl<'t, T: Scalar> Layers<'_, 't, T> {
    pub fn conv(&self, name: &str, x: Var<'t, T>, opts: ConvOpts) -> Result<Var<'t, T>> {
        let w = self.bound.get(&format!("{name}.weight"))?;
        let bias_name = format!("{name}.bias");
        let b = if self.store.contains(&bias_name) {
            Some(self.bound.get(&bias_name)?)
        } else {
            None
        };
        Ok(x.conv2d(&w, b.as_ref(), opts)?)
    }

    pub fn conv_transpose(&self, name: &str, x: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        let w = self.bound.get(&format!("{name}.weight"))?;
        let b = self.bound.get(&format!("{name}.bias"))?;
        Ok(x.conv_transpose2d(&w, Some(&b), stride, 0)?)
    }

    pub fn batch_norm(&mut self, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let gamma = self.bound.get(&format!("{name}.gamma"))?;
        let beta = self.bound.get(&format!("{name}.beta"))?;
        let mean_name = format!("{name}.running_mean");
        let var_name = format!("{name}.running_var");
        let bn = x.batch_norm(
            &gamma,
            &beta,
            self.store.get(&mean_name)?,
            self.store.get(&var_name)?,
            self.training,
            T::of(BN_MOMENTUM),
            T::of(BN_EPS),
        )?;
        if self.training {
            self.store.set(&mean_name, bn.running_mean)?;
            self.store.set(&var_name, bn.running_var)?;
        }
        Ok(bn.out)
    }

    /// conv (no bias) → batchnorm → ReLU, with parameters under `name.conv`
    /// and `name.bn`.
    pub fn conv_bn_relu(
        &mut self,
        name: &str,
        x: Var<'t, T>,
        opts: ConvOpts,
    ) -> Result<Var<'t, T>> {
        let y = self.conv(&format!("{name}.conv"), x, opts)?;
        Ok(self.batch_norm(&format!("{name}.bn"), y)?.relu())
    }

    /// Encoder features at every scale: `[stem, stage0, stage1, stage2, stage3]`.
    /// `dilate_last` keeps the last stage at the previous resolution with
    /// dilation 2 instead of pooling (output stride 8).
    pub fn encoder(
        &mut self,
        cfg: &EncoderConfig,
        x: Var<'t, T>,
        dilate_last: bool,
    ) -> Result<Vec<Var<'t, T>>> {
        let stem = self.conv_bn_relu("enc.stem", x, ConvOpts::same(1))?;
        let mut feats = vec![stem];
        let mut cur = stem;
        for k in 0..cfg.stage_widths.len() {
            let last = k + 1 == cfg.stage_widths.len();
            let opts = if last && dilate_last {
                ConvOpts::atrous(2)
            } else {
                cur = cur.maxpool2d(2, 2)?;
                ConvOpts::same(1)
            };
            for b in 0..cfg.blocks_per_stage {
                cur = self.conv_bn_relu(&format!("enc.stage{k}.block{b}"), cur, opts)?;
            }
            feats.push(cur);
        }
        Ok(feats)
    }
}
