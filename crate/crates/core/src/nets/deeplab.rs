use super::{
    check_input, declare_encoder, Bound, EncoderConfig, Layers, Layout, ModelKind, ParamStore,
    SegmentationNet, NUM_CLASSES,
};
use crate::error::Result;
use crate::tensor::{ConvOpts, Scalar, Var};

/// Atrous rates of the three 3×3 pyramid branches, sized for 64×64 inputs
/// at output stride 8.
pub const DEFAULT_ASPP_RATES: [usize; 3] = [2, 4, 6];

/// Width of the low-level skip projection in the decoder.
const LOW_LEVEL_WIDTH: usize = 16;

/// DeepLab-style network at output stride 8.
///
/// The encoder's last stage keeps 1/8 resolution and uses dilation 2. Its
/// output feeds the pyramid head: a 1×1 branch, three atrous 3×3 branches
/// and an image-level (global average pool) branch, concatenated and
/// projected by a 1×1 conv. The decoder upsamples the pyramid output
/// bilinearly to full resolution, fuses it with a 1×1 projection of the stem
/// features and refines with a 3×3 block before the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepLabLiteModel<T: Scalar = f32> {
    pub(crate) cfg: EncoderConfig,
    pub(crate) rates: [usize; 3],
    pub(crate) params: ParamStore<T>,
}

impl<T: Scalar> DeepLabLiteModel<T> {
    pub fn new(cfg: &EncoderConfig, rates: [usize; 3], seed: u64) -> Result<Self> {
        cfg.validate()?;
        if rates.contains(&0) {
            return Err(crate::Error::Config("atrous rates must be >= 1".into()));
        }
        let mut layout = Layout::default();
        declare_encoder(&mut layout, cfg);
        let w = &cfg.stage_widths;
        let (deep, aspp) = (w[3], w[1]);
        layout.conv("aspp.branch0.conv", deep, aspp, 1, false);
        layout.batch_norm("aspp.branch0.bn", aspp);
        for b in 1..=rates.len() {
            layout.conv(&format!("aspp.branch{b}.conv"), deep, aspp, 3, false);
            layout.batch_norm(&format!("aspp.branch{b}.bn"), aspp);
        }
        // The image-level branch sees one value per channel, so it gets a
        // bias instead of batchnorm.
        layout.conv("aspp.pool", deep, aspp, 1, true);
        layout.conv("aspp.proj.conv", 5 * aspp, aspp, 1, false);
        layout.batch_norm("aspp.proj.bn", aspp);
        layout.conv("dec.low.conv", w[0], LOW_LEVEL_WIDTH, 1, false);
        layout.batch_norm("dec.low.bn", LOW_LEVEL_WIDTH);
        layout.conv("dec.refine.conv", aspp + LOW_LEVEL_WIDTH, aspp, 3, false);
        layout.batch_norm("dec.refine.bn", aspp);
        layout.conv("head", aspp, NUM_CLASSES, 1, true);
        Ok(DeepLabLiteModel {
            cfg: cfg.clone(),
            rates,
            params: layout.build(seed),
        })
    }

    pub fn rates(&self) -> [usize; 3] {
        self.rates
    }

    /// Same parameters, different atrous rates.
    pub fn with_rates(&self, rates: [usize; 3]) -> Self {
        DeepLabLiteModel {
            rates,
            ..self.clone()
        }
    }
}

impl<T: Scalar> SegmentationNet<T> for DeepLabLiteModel<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::DeepLab
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
        1 << (self.cfg.stage_widths.len() - 1)
    }

    fn forward<'t>(
        &mut self,
        bound: &Bound<'t, T>,
        input: Var<'t, T>,
        training: bool,
    ) -> Result<Var<'t, T>> {
        let shape = input.shape();
        check_input(&shape, self.cfg.in_channels, self.required_multiple())?;
        let (h, w) = (shape[2], shape[3]);
        let rates = self.rates;
        let mut layers = Layers {
            bound,
            store: &mut self.params,
            training,
        };
        let feats = layers.encoder(&self.cfg, input, true)?;
        let deep = feats[feats.len() - 1];
        let deep_shape = deep.shape();

        let mut branches = vec![layers.conv_bn_relu("aspp.branch0", deep, ConvOpts::default())?];
        for (b, &rate) in rates.iter().enumerate() {
            let name = format!("aspp.branch{}", b + 1);
            branches.push(layers.conv_bn_relu(&name, deep, ConvOpts::atrous(rate))?);
        }
        let pooled = layers
            .conv("aspp.pool", deep.global_avg_pool()?, ConvOpts::default())?
            .relu()
            .bilinear_upsample(deep_shape[2], deep_shape[3])?;
        branches.push(pooled);
        let cat = Var::concat_channels(&branches)?;
        let aspp = layers.conv_bn_relu("aspp.proj", cat, ConvOpts::default())?;

        let up = aspp.bilinear_upsample(h, w)?;
        let low = layers.conv_bn_relu("dec.low", feats[0], ConvOpts::default())?;
        let fused = Var::concat_channels(&[up, low])?;
        let refined = layers.conv_bn_relu("dec.refine", fused, ConvOpts::same(1))?;
        layers.conv("head", refined, ConvOpts::default())
    }
}
