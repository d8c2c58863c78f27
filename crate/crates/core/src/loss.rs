//! Segmentation losses: soft Dice, binary focal, and their deep-supervision
//! combination. Plain functions evaluate in `f64`; the [`Tape`] methods are
//! differentiable.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{log_sigmoid, sigmoid};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DICE_SMOOTH: f64 = 1e-5;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Lower clamp of `p_t` inside the focal logarithm.
pub const FOCAL_LOG_CLAMP: f64 = 1e-12;

fn check_binary<T: Scalar>(op: &'static str, target: &Tensor<T>) -> Result<()> {
    if let Some(v) = target.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid(format!("{op}: target value {} is not 0 or 1", v.as_f64())));
    }
    Ok(())
}

fn check_pair<T: Scalar>(op: &'static str, x: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    x.expect_same_shape(target, op)?;
    if x.rank() < 2 {
        return Err(Error::shape(op, format!("expected a (C, ...) tensor, got {:?}", x.shape())));
    }
    check_binary(op, target)
}

/// Per-channel `(sum p q, sum p + sum q)`.
fn dice_sums<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Vec<(f64, f64)> {
    (0..probs.channels())
        .map(|c| {
            probs
                .channel(c)
                .iter()
                .zip(target.channel(c))
                .fold((0.0, 0.0), |(i, s), (&p, &q)| {
                    let (p, q) = (p.as_f64(), q.as_f64());
                    (i + p * q, s + p + q)
                })
        })
        .collect()
}

/// Mean over channels of `1 - (2 sum p q + eps) / (sum p + sum q + eps)`.
pub fn dice_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_pair("dice_loss", probs, target)?;
    let sums = dice_sums(probs, target);
    let c = sums.len() as f64;
    Ok(sums
        .iter()
        .map(|&(i, s)| 1.0 - (2.0 * i + DICE_SMOOTH) / (s + DICE_SMOOTH))
        .sum::<f64>()
        / c)
}

/// `(loss, dloss/dz)` of one element; `u` is the logit signed by the target.
fn focal_term(u: f64, gamma: f64) -> (f64, f64) {
    let q = sigmoid(u);
    let one_minus_q = sigmoid(-u);
    let log_q = log_sigmoid(u);
    let w = one_minus_q.powf(gamma);
    if q < FOCAL_LOG_CLAMP {
        let lc = FOCAL_LOG_CLAMP.ln();
        (-w * lc, gamma * q * w * lc)
    } else {
        (-w * log_q, gamma * q * w * log_q - w * one_minus_q)
    }
}

/// Mean binary focal loss `-(1 - p_t)^gamma ln p_t` on sigmoid probabilities
/// of `logits`, with `p_t` clamped below at [`FOCAL_LOG_CLAMP`].
pub fn focal_loss<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>, gamma: f64) -> Result<f64> {
    check_pair("focal_loss", logits, target)?;
    let n = logits.numel() as f64;
    Ok(logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| {
            let s = if t == T::one() { 1.0 } else { -1.0 };
            focal_term(s * z.as_f64(), gamma).0
        })
        .sum::<f64>()
        / n)
}

/// Dice on sigmoid probabilities plus focal loss, from logits.
pub fn segmentation_loss<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let probs = logits.map(sigmoid);
    Ok(dice_loss(&probs, target)? + focal_loss(logits, target, FOCAL_GAMMA)?)
}

/// `sum_k w_k L_seg(outputs_k)`.
pub fn deep_supervision_loss<T: Scalar>(outputs: [&Tensor<T>; 4], target: &Tensor<T>, weights: [f64; 4]) -> Result<f64> {
    let mut total = 0.0;
    for (o, w) in outputs.into_iter().zip(weights) {
        total += w * segmentation_loss(o, target)?;
    }
    Ok(total)
}

impl<T: Scalar> Tape<T> {
    /// Differentiable [`dice_loss`]; the target is a constant.
    pub fn dice_loss(&self, probs: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
        let loss = dice_loss(probs.value(), target)?;
        let sums = dice_sums(probs.value(), target);
        let target = target.clone();
        Ok(self.custom("dice_loss", Tensor::scalar(T::of(loss)), &[probs], move |g, _| {
            let scale = g.item().as_f64() / sums.len() as f64;
            let inner = target.inner_len();
            let grad = Tensor::from_fn(target.shape(), |j| {
                let (i, s) = sums[j / inner];
                let den = s + DICE_SMOOTH;
                let q = target.data()[j].as_f64();
                T::of(-scale * (2.0 * q * den - (2.0 * i + DICE_SMOOTH)) / (den * den))
            });
            Ok(vec![Some(grad)])
        }))
    }

    /// Differentiable [`focal_loss`] with respect to the logits.
    pub fn focal_loss(&self, logits: &Var<T>, target: &Tensor<T>, gamma: f64) -> Result<Var<T>> {
        let loss = focal_loss(logits.value(), target, gamma)?;
        let z = logits.shared();
        let target = target.clone();
        Ok(self.custom("focal_loss", Tensor::scalar(T::of(loss)), &[logits], move |g, _| {
            let scale = g.item().as_f64() / z.numel() as f64;
            let grad = z.zip_map(&target, |zv, t| {
                let s = if t == T::one() { 1.0 } else { -1.0 };
                T::of(scale * s * focal_term(s * zv.as_f64(), gamma).1)
            });
            Ok(vec![Some(grad?)])
        }))
    }

    /// Differentiable [`segmentation_loss`].
    pub fn segmentation_loss(&self, logits: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
        let dice = self.dice_loss(&self.sigmoid(logits), target)?;
        let focal = self.focal_loss(logits, target, FOCAL_GAMMA)?;
        self.add(&dice, &focal)
    }

    /// Differentiable [`deep_supervision_loss`].
    pub fn deep_supervision_loss(&self, outputs: [&Var<T>; 4], target: &Tensor<T>, weights: [f64; 4]) -> Result<Var<T>> {
        let mut total: Option<Var<T>> = None;
        for (o, w) in outputs.into_iter().zip(weights) {
            let term = self.scale(&self.segmentation_loss(o, target)?, w);
            total = Some(match total {
                Some(t) => self.add(&t, &term)?,
                None => term,
            });
        }
        Ok(total.expect("four outputs"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn random_pair(seed: u64, shape: [usize; 4]) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = Rng::new(seed);
        let z = Tensor::from_fn(shape, |_| rng.uniform_in(-4.0, 4.0));
        let t = Tensor::from_fn(shape, |_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 });
        (z, t)
    }

    #[test]
    fn dice_extremes() {
        let (_, t) = random_pair(1, [3, 4, 4, 4]);
        assert!(dice_loss(&t, &t).unwrap() < 1e-4);
        let inv = t.map(|v| 1.0 - v);
        assert!((dice_loss(&inv, &t).unwrap() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn focal_with_zero_gamma_is_cross_entropy() {
        let (z, t) = random_pair(2, [3, 2, 3, 4]);
        let bce: f64 = z
            .data()
            .iter()
            .zip(t.data())
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / z.numel() as f64;
        let f = focal_loss(&z, &t, 0.0).unwrap();
        assert!((f - bce).abs() <= 1e-12 * bce.abs());
    }

    #[test]
    fn confident_predictions_have_small_focal_loss() {
        let (_, t) = random_pair(3, [3, 2, 2, 2]);
        let z = t.map(|v| if v == 1.0 { 30.0 } else { -30.0 });
        assert!(focal_loss(&z, &t, 2.0).unwrap() < 1e-20);
    }

    #[test]
    fn focal_rejects_non_binary_target() {
        let z = Tensor::<f64>::zeros([1, 1, 1, 2]);
        let t = Tensor::new([1, 1, 1, 2], vec![0.0, 0.5]).unwrap();
        assert!(focal_loss(&z, &t, 2.0).is_err());
    }

    #[test]
    fn clamped_log_is_bounded() {
        let t = Tensor::<f64>::ones([1, 1, 1, 1]);
        let z = Tensor::full([1, 1, 1, 1], -200.0);
        let f = focal_loss(&z, &t, 2.0).unwrap();
        assert!((f + FOCAL_LOG_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn identical_outputs_collapse_to_single_loss() {
        let (z, t) = random_pair(4, [3, 2, 2, 2]);
        let one = segmentation_loss(&z, &t).unwrap();
        let all = deep_supervision_loss([&z, &z, &z, &z], &t, [0.2, 0.3, 0.3, 0.2]).unwrap();
        assert!((one - all).abs() < 1e-12);
    }

    #[test]
    fn tape_losses_match_plain_values() {
        let (z, t) = random_pair(5, [3, 2, 3, 2]);
        let tape = Tape::new();
        let v = tape.leaf(z.clone());
        let l = tape.segmentation_loss(&v, &t).unwrap();
        assert!((l.value().item() - segmentation_loss(&z, &t).unwrap()).abs() < 1e-14);
    }
}
