mod common;

use common::{randn, rng};
use rand::Rng;
use terrafuse::losses::{total_loss, LossConfig};
use terrafuse::nets::{EncoderConfig, Model, ModelKind, SegmentationNet};
use terrafuse::tensor::gradcheck::relative_error;
use terrafuse::tensor::{Tape, Tensor};

const KINDS: [ModelKind; 2] = [ModelKind::UNet, ModelKind::DeepLab];

#[test]
fn default_parameter_counts() {
    let cfg = EncoderConfig::default();
    let unet = Model::<f32>::build(ModelKind::UNet, &cfg, 0).unwrap();
    let deeplab = Model::<f32>::build(ModelKind::DeepLab, &cfg, 0).unwrap();
    assert_eq!(unet.params().trainable_count(), 247_011);
    assert_eq!(deeplab.params().trainable_count(), 239_699);
}

#[test]
fn logits_keep_input_resolution() {
    let cfg = EncoderConfig::default();
    for kind in KINDS {
        let mut m = Model::<f32>::build(kind, &cfg, 1).unwrap();
        for (h, w) in [(16, 16), (32, 48), (64, 64)] {
            let y = m.infer(&Tensor::zeros([2, 11, h, w])).unwrap();
            assert_eq!(y.shape(), &[2, 3, h, w], "{kind}");
        }
        assert!(m.infer(&Tensor::zeros([1, 11, 20, 16])).is_err(), "{kind}");
        assert!(m.infer(&Tensor::zeros([1, 10, 16, 16])).is_err(), "{kind}");
    }
}

#[test]
fn initialisation_is_seeded() {
    let cfg = EncoderConfig::default();
    for kind in KINDS {
        let a = Model::<f32>::build(kind, &cfg, 7).unwrap();
        let b = Model::<f32>::build(kind, &cfg, 7).unwrap();
        let c = Model::<f32>::build(kind, &cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

fn loss_of(model: &Model<f64>, x: &Tensor<f64>, target: &[u8]) -> f64 {
    let mut m = model.clone();
    let tape = Tape::new();
    let bound = m.params().bind(&tape, false);
    let logits = m.forward(&bound, tape.constant(x.clone()), true).unwrap();
    total_loss(&logits, target, &LossConfig::default())
        .unwrap()
        .item()
}

/// Analytic gradients of the training loss against central differences, for a
/// few elements of every parameter and of the input.
#[test]
fn network_gradients_match_finite_differences() {
    let cfg = EncoderConfig {
        in_channels: 3,
        stage_widths: vec![4, 4, 6, 6],
        blocks_per_stage: 1,
    };
    let step = 1e-6;
    for kind in KINDS {
        let mut r = rng(kind as u64 + 3);
        let model = Model::<f64>::build(kind, &cfg, 5).unwrap();
        let x = randn(&mut r, &[2, 3, 16, 16]);
        let target: Vec<u8> = (0..2 * 16 * 16).map(|_| r.gen_range(0..3)).collect();

        let tape = Tape::new();
        let mut m = model.clone();
        let bound = m.params().bind(&tape, true);
        let input = tape.leaf(x.clone(), true);
        let logits = m.forward(&bound, input, true).unwrap();
        let loss = total_loss(&logits, &target, &LossConfig::default()).unwrap();
        let grads = tape.backward(loss);

        let mut worst = 0.0f64;
        for (name, var) in bound.iter() {
            let g = grads.get(var).expect("parameter gradient");
            let n = g.numel();
            for k in [0, n / 2, n - 1] {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let mut t = plus.params().get(name).unwrap().clone();
                t.data_mut()[k] += step;
                plus.params_mut().set(name, t).unwrap();
                let mut t = minus.params().get(name).unwrap().clone();
                t.data_mut()[k] -= step;
                minus.params_mut().set(name, t).unwrap();
                let numeric =
                    (loss_of(&plus, &x, &target) - loss_of(&minus, &x, &target)) / (2.0 * step);
                let e = relative_error(g.data()[k], numeric);
                assert!(
                    e < 1e-4,
                    "{kind} {name}[{k}]: analytic {} numeric {numeric}",
                    g.data()[k]
                );
                worst = worst.max(e);
            }
        }
        let gx = grads.get(input).expect("input gradient");
        for k in (0..x.numel()).step_by(97) {
            let mut xp = x.clone();
            xp.data_mut()[k] += step;
            let mut xm = x.clone();
            xm.data_mut()[k] -= step;
            let numeric =
                (loss_of(&model, &xp, &target) - loss_of(&model, &xm, &target)) / (2.0 * step);
            let e = relative_error(gx.data()[k], numeric);
            assert!(
                e < 1e-4,
                "{kind} input[{k}]: analytic {} numeric {numeric}",
                gx.data()[k]
            );
        }
        assert!(worst.is_finite());
    }
}
