//! Classification and box-regression losses with closed-form gradients.
//!
//! Every function returns `(loss, d loss / d input)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{sigmoid, Real};

pub const DEFAULT_LAMBDA: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the sigmoid classification term.
    pub lambda: f64,
    pub smooth_l1_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            smooth_l1_delta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.smooth_l1_delta > 0.0 && self.smooth_l1_delta.is_finite()) {
            return Err(Error::invalid("smooth_l1_delta must be > 0"));
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy over `labels.len()` rows of `classes` logits.
pub fn softmax_ce<T: Real>(logits: &[T], classes: usize, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::invalid("softmax_ce on an empty batch"));
    }
    if classes < 2 {
        return Err(Error::invalid("softmax_ce needs at least two classes"));
    }
    if logits.len() != n * classes {
        return Err(Error::shape(format!(
            "softmax_ce: {} logits for {n} x {classes}",
            logits.len()
        )));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (gc, &v) in g.iter_mut().zip(row) {
            *gc = (v - log_z).exp() * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Sigmoid output against real-valued targets under a halved squared error,
/// `sum((sigmoid(x) - y)^2) / (2N)`.
pub fn precise_sigmoid_loss<T: Real>(logits: &[T], targets: &[T]) -> Result<(T, Vec<T>)> {
    if logits.len() != targets.len() {
        return Err(Error::shape(format!(
            "precise_sigmoid_loss: {} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| !(**t >= T::zero() && **t <= T::one())) {
        return Err(Error::invalid(format!("target {t} outside [0, 1]")));
    }
    let n = logits.len();
    if n == 0 {
        return Ok((T::zero(), Vec::new()));
    }
    let inv_n = T::one() / T::of(n as f64);
    let half = T::of(0.5);
    let mut loss = T::zero();
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| {
            let s = sigmoid(x);
            let d = s - y;
            loss += d * d;
            d * s * (T::one() - s) * inv_n
        })
        .collect();
    Ok((loss * half * inv_n, grad))
}

/// Smooth L1, summed over elements and divided by `normalizer` (the number of
/// positive anchors in detection training).
pub fn smooth_l1<T: Real>(pred: &[T], target: &[T], delta: T, normalizer: usize) -> Result<(T, Vec<T>)> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "smooth_l1: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok((T::zero(), Vec::new()));
    }
    if normalizer == 0 {
        return Err(Error::invalid("smooth_l1 normalizer must be >= 1"));
    }
    let inv = T::one() / T::of(normalizer as f64);
    let half = T::of(0.5);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            if d.abs() < delta {
                loss += half * d * d / delta;
                d / delta * inv
            } else {
                loss += d.abs() - half * delta;
                d.signum() * inv
            }
        })
        .collect();
    Ok((loss * inv, grad))
}

/// `lambda * cls + reg`.
pub fn total_loss(cls_loss: f64, reg_loss: f64, lambda: f64) -> f64 {
    lambda * cls_loss + reg_loss
}
