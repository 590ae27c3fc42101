//! Detection loss evaluated directly on the network's output maps.

use super::net::{HeadKind, NetOutput};
use super::tensor::Tensor;
use crate::assignment::{AnchorLabel, Assignment};
use crate::error::{Error, Result};
use crate::loss::{precise_sigmoid_loss, smooth_l1, softmax_ce, LossConfig};
use crate::num::Real;

/// Map position of anchor `a`: `(scale, row, col)` for anchors laid out
/// row-major over cells with `k` scales per cell.
#[inline]
pub fn anchor_slot(a: usize, k: usize, feature_w: usize) -> (usize, usize, usize) {
    let cell = a / k;
    (a % k, cell / feature_w, cell % feature_w)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

/// Weight on the classification term: `lambda` for the sigmoid head, 1 for
/// softmax.
pub fn cls_weight(head: HeadKind, cfg: &LossConfig) -> f64 {
    match head {
        HeadKind::PreciseSigmoid => cfg.lambda,
        HeadKind::Softmax => 1.0,
    }
}

/// Classification loss over every sampled anchor of the batch plus smooth L1
/// over the sampled positives, with gradients w.r.t. both maps.
///
/// `assignments[b]` and `samples[b]` describe batch item `b`.
pub fn detection_loss<T: Real>(
    out: &NetOutput<T>,
    head: HeadKind,
    num_anchors: usize,
    assignments: &[&Assignment],
    samples: &[Vec<usize>],
    cfg: &LossConfig,
) -> Result<(LossParts, Tensor<T>, Tensor<T>)> {
    let [n, cc, fh, fw] = out.cls.shape();
    let k = num_anchors;
    if cc != head.cls_channels(k) || out.reg.shape() != [n, 4 * k, fh, fw] {
        return Err(Error::shape(format!(
            "output maps {:?}/{:?} do not fit {k} anchors with a {head:?} head",
            out.cls.shape(),
            out.reg.shape()
        )));
    }
    if assignments.len() != n || samples.len() != n {
        return Err(Error::shape("one assignment and sample list per batch item required"));
    }
    if let Some(a) = assignments.iter().find(|a| a.len() != fh * fw * k) {
        return Err(Error::shape(format!(
            "assignment covers {} anchors, maps hold {}",
            a.len(),
            fh * fw * k
        )));
    }

    let mut cls_idx = Vec::new();
    let mut logits = Vec::new();
    let mut soft_targets = Vec::new();
    let mut hard_labels = Vec::new();
    let mut reg_idx = Vec::new();
    let mut reg_pred = Vec::new();
    let mut reg_target = Vec::new();
    let mut n_pos = 0;
    for (b, (asg, sample)) in assignments.iter().zip(samples).enumerate() {
        for &a in sample {
            let (s, i, j) = anchor_slot(a, k, fw);
            let label = asg.labels[a];
            let Some(target) = label.target() else { continue };
            match head {
                HeadKind::PreciseSigmoid => {
                    let idx = out.cls.index(b, s, i, j);
                    cls_idx.push(idx);
                    logits.push(out.cls.data()[idx]);
                    soft_targets.push(T::of(target));
                }
                HeadKind::Softmax => {
                    let bg = out.cls.index(b, s, i, j);
                    let fg = out.cls.index(b, k + s, i, j);
                    cls_idx.extend([bg, fg]);
                    logits.extend([out.cls.data()[bg], out.cls.data()[fg]]);
                    hard_labels.push(usize::from(label.is_positive()));
                }
            }
            if let (AnchorLabel::Positive(_), Some(t)) = (label, asg.targets[a]) {
                n_pos += 1;
                for (c, &tc) in t.iter().enumerate() {
                    let idx = out.reg.index(b, 4 * s + c, i, j);
                    reg_idx.push(idx);
                    reg_pred.push(out.reg.data()[idx]);
                    reg_target.push(T::of(tc));
                }
            }
        }
    }

    let w = cls_weight(head, cfg);
    let mut d_cls = Tensor::zeros(out.cls.shape());
    let mut d_reg = Tensor::zeros(out.reg.shape());

    let (cls_loss, cls_grad) = match head {
        HeadKind::PreciseSigmoid => precise_sigmoid_loss(&logits, &soft_targets)?,
        HeadKind::Softmax if hard_labels.is_empty() => (T::zero(), Vec::new()),
        HeadKind::Softmax => softmax_ce(&logits, 2, &hard_labels)?,
    };
    let wt = T::of(w);
    for (&idx, g) in cls_idx.iter().zip(cls_grad) {
        d_cls.data_mut()[idx] += wt * g;
    }

    let (reg_loss, reg_grad) = if n_pos == 0 {
        (T::zero(), Vec::new())
    } else {
        smooth_l1(&reg_pred, &reg_target, T::of(cfg.smooth_l1_delta), n_pos)?
    };
    for (&idx, g) in reg_idx.iter().zip(reg_grad) {
        d_reg.data_mut()[idx] += g;
    }

    let (cls, reg) = (cls_loss.f64(), reg_loss.f64());
    Ok((
        LossParts {
            cls,
            reg,
            total: w * cls + reg,
        },
        d_cls,
        d_reg,
    ))
}
