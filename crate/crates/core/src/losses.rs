//! Training objective: `beta · cross_entropy + (1 − beta) · soft_dice`.
//!
//! Targets are flat `(n, h, w)` row-major class maps with values in
//! `{0, 1, 2}`, matching the logits' batch and spatial layout.

use crate::error::{Error, Result, ShapeError};
use crate::nets::NUM_CLASSES;
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the cross-entropy term.
    pub beta: f64,
    /// Additive smoothing of the Dice ratio.
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.5,
            dice_eps: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::Config(format!(
                "dice_eps {} must be > 0",
                self.dice_eps
            )));
        }
        Ok(())
    }
}

fn check_target(op: &'static str, shape: &[usize], target: &[u8]) -> Result<[usize; 4]> {
    let &[n, c, h, w] = shape else {
        return Err(ShapeError::Rank {
            op,
            expected: 4,
            got: shape.to_vec(),
        }
        .into());
    };
    if c != NUM_CLASSES {
        return Err(ShapeError::Axis {
            op,
            axis: "class",
            left: c,
            right: NUM_CLASSES,
        }
        .into());
    }
    if target.len() != n * h * w {
        return Err(ShapeError::Argument {
            op,
            msg: format!(
                "target has {} pixels, logits have {}",
                target.len(),
                n * h * w
            ),
        }
        .into());
    }
    if let Some((index, &value)) = target
        .iter()
        .enumerate()
        .find(|(_, &v)| v as usize >= NUM_CLASSES)
    {
        return Err(crate::error::FormatError::InvalidClass { value, index }.into());
    }
    Ok([n, c, h, w])
}

/// Mean over pixels of `−log softmax(logits)[true class]`.
pub fn cross_entropy<'t, T: Scalar>(logits: &Var<'t, T>, target: &[u8]) -> Result<Var<'t, T>> {
    let x = logits.value();
    let [n, c, h, w] = check_target("cross_entropy", x.shape(), target)?;
    let hw = h * w;
    let mut probs = Tensor::zeros(x.shape().to_vec());
    let mut total = T::zero();
    for i in 0..n {
        for j in 0..hw {
            let idx = |ch: usize| (i * c + ch) * hw + j;
            let max = (0..c).fold(T::neg_infinity(), |m, ch| m.max(x.data()[idx(ch)]));
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x.data()[idx(ch)] - max).exp();
                probs.data_mut()[idx(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                probs.data_mut()[idx(ch)] = probs.data()[idx(ch)] / z;
            }
            let y = target[i * hw + j] as usize;
            total += z.ln() - (x.data()[idx(y)] - max);
        }
    }
    let m = T::of((n * hw) as f64);
    let target = target.to_vec();
    Ok(logits
        .tape()
        .op(Tensor::scalar(total / m), &[*logits], move |g, _| {
            let scale = g.data()[0] / m;
            let mut dx = probs.clone();
            for i in 0..n {
                for j in 0..hw {
                    let y = target[i * hw + j] as usize;
                    dx.data_mut()[(i * c + y) * hw + j] -= T::one();
                }
            }
            dx.data_mut().iter_mut().for_each(|v| *v *= scale);
            vec![Some(dx)]
        }))
}

/// Soft counts per class: (Σ p·y, Σ p, Σ y) over the whole batch.
fn soft_counts<T: Scalar>(
    p: &Tensor<T>,
    target: &[u8],
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<(T, T, T)> {
    let mut counts = vec![(T::zero(), T::zero(), T::zero()); c];
    for i in 0..n {
        for (ch, slot) in counts.iter_mut().enumerate() {
            let plane = &p.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            let labels = &target[i * hw..(i + 1) * hw];
            for (&pv, &y) in plane.iter().zip(labels) {
                slot.1 += pv;
                if y as usize == ch {
                    slot.0 += pv;
                    slot.2 += T::one();
                }
            }
        }
    }
    counts
}

/// Per-class soft Dice losses `1 − (2TP + eps) / (2TP + FP + FN + eps)` with
/// TP = Σ p·y, FP = Σ p·(1 − y), FN = Σ (1 − p)·y, pooled over the batch.
pub fn soft_dice_per_class<T: Scalar>(
    probs: &Tensor<T>,
    target: &[u8],
    eps: f64,
) -> Result<Vec<f64>> {
    let [n, c, h, w] = check_target("soft_dice", probs.shape(), target)?;
    let eps = T::of(eps);
    let two = T::of(2.0);
    Ok(soft_counts(probs, target, n, c, h * w)
        .into_iter()
        .map(|(tp, sp, sy)| {
            let (fp, fneg) = (sp - tp, sy - tp);
            (T::one() - (two * tp + eps) / (two * tp + fp + fneg + eps))
                .to_f64()
                .unwrap_or(f64::NAN)
        })
        .collect())
}

/// Mean of the per-class soft Dice losses over all three classes.
pub fn soft_dice_loss<'t, T: Scalar>(
    probs: &Var<'t, T>,
    target: &[u8],
    eps: f64,
) -> Result<Var<'t, T>> {
    let p = probs.value();
    let [n, c, h, w] = check_target("soft_dice", p.shape(), target)?;
    let hw = h * w;
    let e = T::of(eps);
    let two = T::of(2.0);
    let counts = soft_counts(&p, target, n, c, hw);
    // 2TP + FP + FN = Σp + Σy, so each class ratio is (2·Σpy + eps) / (Σp + Σy + eps).
    let ratios: Vec<(T, T)> = counts
        .iter()
        .map(|&(tp, sp, sy)| (two * tp + e, sp + sy + e))
        .collect();
    let cf = T::of(c as f64);
    let loss = ratios
        .iter()
        .fold(T::zero(), |acc, &(num, den)| acc + (T::one() - num / den))
        / cf;
    let target = target.to_vec();
    let shape = p.shape().to_vec();
    Ok(probs
        .tape()
        .op(Tensor::scalar(loss), &[*probs], move |g, _| {
            let gs = g.data()[0];
            let mut dp = Tensor::zeros(shape.clone());
            for i in 0..n {
                for (ch, &(num, den)) in ratios.iter().enumerate() {
                    // d/dp of −(num/den)/c: −(2y·den − num) / (den²·c)
                    let on = -(two * den - num) / (den * den * cf) * gs;
                    let off = num / (den * den * cf) * gs;
                    let plane = &mut dp.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    for (d, &y) in plane.iter_mut().zip(&target[i * hw..(i + 1) * hw]) {
                        *d = if y as usize == ch { on } else { off };
                    }
                }
            }
            vec![Some(dp)]
        }))
}

/// `beta · cross_entropy(logits) + (1 − beta) · soft_dice(softmax(logits))`.
pub fn total_loss<'t, T: Scalar>(
    logits: &Var<'t, T>,
    target: &[u8],
    cfg: &LossConfig,
) -> Result<Var<'t, T>> {
    cfg.validate()?;
    let ce = cross_entropy(logits, target)?;
    let dice = soft_dice_loss(&logits.softmax_channels()?, target, cfg.dice_eps)?;
    let beta = T::of(cfg.beta);
    Ok(ce.scale(beta).add(&dice.scale(T::one() - beta))?)
}
