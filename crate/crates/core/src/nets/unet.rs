use super::{
    check_input, declare_encoder, Bound, EncoderConfig, Layers, Layout, ModelKind, ParamStore,
    SegmentationNet, NUM_CLASSES,
};
use crate::error::Result;
use crate::tensor::{ConvOpts, Scalar, Var};

/// U-Net: the encoder's five feature maps (stem plus four pooled stages) are
/// decoded by 2×2 stride-2 transposed convolutions, each followed by
/// concatenation with the encoder map of the same resolution and a 3×3 block.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel<T: Scalar = f32> {
    pub(crate) cfg: EncoderConfig,
    pub(crate) params: ParamStore<T>,
}

impl<T: Scalar> UNetModel<T> {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut layout = Layout::default();
        declare_encoder(&mut layout, cfg);
        let w = &cfg.stage_widths;
        // skip widths from shallow to deep: stem, stage0, stage1, stage2
        let skips = [w[0], w[0], w[1], w[2]];
        let mut cur = w[3];
        for level in (0..skips.len()).rev() {
            let name = format!("dec.level{level}");
            layout.conv_transpose(&format!("{name}.up"), cur, skips[level], 2);
            layout.conv(
                &format!("{name}.block.conv"),
                2 * skips[level],
                skips[level],
                3,
                false,
            );
            layout.batch_norm(&format!("{name}.block.bn"), skips[level]);
            cur = skips[level];
        }
        layout.conv("head", cur, NUM_CLASSES, 1, true);
        Ok(UNetModel {
            cfg: cfg.clone(),
            params: layout.build(seed),
        })
    }
}

impl<T: Scalar> SegmentationNet<T> for UNetModel<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::UNet
    }

    fn encoder(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn required_multiple(&self) -> usize {
        1 << self.cfg.stage_widths.len()
    }

    fn forward<'t>(
        &mut self,
        bound: &Bound<'t, T>,
        input: Var<'t, T>,
        training: bool,
    ) -> Result<Var<'t, T>> {
        check_input(
            &input.shape(),
            self.cfg.in_channels,
            self.required_multiple(),
        )?;
        let mut layers = Layers {
            bound,
            store: &mut self.params,
            training,
        };
        let feats = layers.encoder(&self.cfg, input, false)?;
        let mut cur = feats[feats.len() - 1];
        for level in (0..feats.len() - 1).rev() {
            let name = format!("dec.level{level}");
            let up = layers.conv_transpose(&format!("{name}.up"), cur, 2)?;
            let cat = Var::concat_channels(&[up, feats[level]])?;
            cur = layers.conv_bn_relu(&format!("{name}.block"), cat, ConvOpts::same(1))?;
        }
        layers.conv("head", cur, ConvOpts::default())
    }
}
