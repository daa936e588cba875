use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// AdamW with decoupled weight decay: the decay shrinks parameters directly
/// and never enters the moment estimates.
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to every named parameter that has a gradient.
    /// Gradients are validated before any parameter changes.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::of(c.lr);
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let eps = T::of(c.eps);
        let decay = T::one() - T::of(c.lr * c.weight_decay);
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        for (name, p) in params {
            let Some(g) = grads.get(name) else { continue };
            assert_eq!(p.shape(), g.shape(), "gradient shape for {name}");
            let st = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: vec![T::zero(); g.numel()],
                    v: vec![T::zero(); g.numel()],
                });
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *w = *w * decay;
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64, grad: f64, cfg: AdamWConfig) -> f64 {
        let mut p = Tensor::<f64>::scalar(value);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(grad));
        let mut opt = AdamW::new(cfg);
        opt.step([("w", &mut p)], &grads).unwrap();
        p.data()[0]
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert_eq!(one_param(0.37, 0.0, cfg), 0.37);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = lr / (1 + eps).
        let p = one_param(0.0, 1.0, AdamWConfig::default());
        assert!((p + 0.001 / (1.0 + 1e-8)).abs() < 1e-15, "{p}");
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let p = one_param(1.0, 0.0, cfg);
        assert!((p - (1.0 - 0.001 * 0.1)).abs() < 1e-15, "{p}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = Tensor::<f32>::scalar(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("enc.stem.weight".to_string(), Tensor::scalar(f32::NAN));
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step([("enc.stem.weight", &mut p)], &grads).unwrap_err();
        assert!(err.to_string().contains("enc.stem.weight"));
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn step_counter_increases() {
        let mut p = Tensor::<f32>::scalar(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.5));
        let mut opt = AdamW::new(AdamWConfig::default());
        for k in 1..=3 {
            opt.step([("w", &mut p)], &grads).unwrap();
            assert_eq!(opt.steps(), k);
        }
    }
}
