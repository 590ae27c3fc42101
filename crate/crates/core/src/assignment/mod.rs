//! Anchor labeling: IoU rules, forced matching, box regression targets and
//! mini-batch sampling.

mod rule;
mod stats;

pub use rule::{label_of, AnchorLabel, LabelRule, DEFAULT_BOUND_NEG, DEFAULT_BOUND_POS};
pub use stats::{label_stats, LabelHistogram};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{iou_matrix, BBox};

pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_MAX_POS_FRACTION: f64 = 0.5;

/// Per-anchor training labels for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub labels: Vec<AnchorLabel>,
    /// Highest IoU of each anchor over all ground truths (0 without any).
    pub max_iou: Vec<f64>,
    /// Argmax ground truth, set for positive anchors only.
    pub matched: Vec<Option<usize>>,
    /// `(tx, ty, tw, th)` towards the matched ground truth, positives only.
    pub targets: Vec<Option<[f64; 4]>>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.is_positive().then_some(i))
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, AnchorLabel::Negative).then_some(i))
    }
}

/// Labels every anchor from its best IoU over `gts`.
///
/// With `force_best_match`, the highest-IoU anchor of each ground truth
/// (lowest index on ties, only when that IoU is non-zero) becomes positive
/// with at least the rule's floor score.
pub fn assign(anchors: &[BBox], gts: &[BBox], rule: &LabelRule, force_best_match: bool) -> Assignment {
    let n = anchors.len();
    if gts.is_empty() {
        return Assignment {
            labels: vec![AnchorLabel::Negative; n],
            max_iou: vec![0.0; n],
            matched: vec![None; n],
            targets: vec![None; n],
        };
    }
    let ious = iou_matrix(anchors, gts);
    let mut labels = Vec::with_capacity(n);
    let mut max_iou = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for i in 0..n {
        let (best_j, best) = ious
            .row(i)
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        labels.push(rule::label_unchecked(rule, best));
        max_iou.push(best);
        argmax.push(best_j);
    }

    if force_best_match {
        for j in 0..gts.len() {
            let mut best_i = None;
            let mut best = 0.0;
            for i in 0..n {
                let v = ious.get(i, j);
                if v > best {
                    best = v;
                    best_i = Some(i);
                }
            }
            if let Some(i) = best_i {
                let floor = rule.floor_score(max_iou[i]);
                labels[i] = match labels[i] {
                    AnchorLabel::Positive(t) => AnchorLabel::Positive(t.max(floor)),
                    _ => AnchorLabel::Positive(floor),
                };
            }
        }
    }

    let mut matched = vec![None; n];
    let mut targets = vec![None; n];
    for i in 0..n {
        if labels[i].is_positive() {
            let g = &gts[argmax[i]];
            matched[i] = Some(argmax[i]);
            targets[i] = regression_targets(&anchors[i], g).ok();
        }
    }
    Assignment {
        labels,
        max_iou,
        matched,
        targets,
    }
}

/// Center/log-size offsets of `gt` relative to `anchor`.
pub fn regression_targets(anchor: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    if anchor.is_degenerate() {
        return Err(Error::invalid(format!("degenerate anchor {anchor:?}")));
    }
    if gt.is_degenerate() {
        return Err(Error::invalid(format!("degenerate ground truth {gt:?}")));
    }
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (gx, gy) = gt.center();
    Ok([
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ])
}

/// Inverse of [`regression_targets`].
pub fn decode_box(anchor: &BBox, t: &[f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + t[0] * aw;
    let cy = ay + t[1] * ah;
    let w = aw * t[2].exp();
    let h = ah * t[3].exp();
    BBox::from_center(cx, cy, w, h)
}

/// Draws up to `batch_size` labeled anchors: at most
/// `floor(max_pos_fraction * batch_size)` positives, the rest negatives.
/// Returned indices are sorted.
pub fn sample_minibatch<R: Rng + ?Sized>(
    a: &Assignment,
    batch_size: usize,
    max_pos_fraction: f64,
    rng: &mut R,
) -> Vec<usize> {
    let pos: Vec<usize> = a.positives().collect();
    let neg: Vec<usize> = a.negatives().collect();
    let pos_cap = ((max_pos_fraction.clamp(0.0, 1.0) * batch_size as f64).floor() as usize).min(batch_size);
    let n_pos = pos.len().min(pos_cap);
    let n_neg = neg.len().min(batch_size - n_pos);

    let mut out = Vec::with_capacity(n_pos + n_neg);
    out.extend(index::sample(rng, pos.len(), n_pos).into_iter().map(|k| pos[k]));
    out.extend(index::sample(rng, neg.len(), n_neg).into_iter().map(|k| neg[k]));
    out.sort_unstable();
    out
}

/// Seeded convenience wrapper around [`sample_minibatch`].
pub fn sample_minibatch_seeded(a: &Assignment, batch_size: usize, max_pos_fraction: f64, seed: u64) -> Vec<usize> {
    sample_minibatch(a, batch_size, max_pos_fraction, &mut ChaCha8Rng::seed_from_u64(seed))
}
