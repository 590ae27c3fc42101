//! Output decoding, top-k selection and greedy non-maximum suppression.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assignment::decode_box;
use crate::error::{Error, Result};
use crate::geometry::{generate_anchors, iou, AnchorConfig, BBox};
use crate::micronet::{anchor_slot, DetectorNet, HeadKind, NetOutput, Tensor};
use crate::num::{sigmoid, Real};

pub const DEFAULT_TOP_K: usize = 300;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.3;
pub const DEFAULT_SCORE_FLOOR: f64 = 0.01;

/// Largest log-scale offset applied when decoding, so a wild regression
/// output cannot overflow `exp`.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    /// Index of the anchor the box was decoded from; breaks score ties.
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub top_k: usize,
    pub nms_threshold: f64,
    pub score_floor: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            top_k: DEFAULT_TOP_K,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            score_floor: DEFAULT_SCORE_FLOOR,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::invalid("nms_threshold must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::invalid("score_floor must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Descending score, then ascending anchor index.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.anchor.cmp(&b.anchor))
}

/// One detection per anchor for batch item `item`, in anchor order.
pub fn decode_outputs<T: Real>(
    out: &NetOutput<T>,
    item: usize,
    cfg: &AnchorConfig,
    head: HeadKind,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let k = cfg.num_scales();
    let [n, cc, fh, fw] = out.cls.shape();
    if item >= n {
        return Err(Error::shape(format!("batch item {item} out of range for batch of {n}")));
    }
    if (fh, fw) != (cfg.feature_h, cfg.feature_w)
        || cc != head.cls_channels(k)
        || out.reg.shape() != [n, 4 * k, fh, fw]
    {
        return Err(Error::shape(format!(
            "maps {:?}/{:?} do not fit a {}x{} grid with {k} scales and a {head:?} head",
            out.cls.shape(),
            out.reg.shape(),
            cfg.feature_h,
            cfg.feature_w
        )));
    }
    let anchors = generate_anchors(cfg);
    Ok(anchors
        .iter()
        .enumerate()
        .map(|(a, anchor)| {
            let (s, i, j) = anchor_slot(a, k, fw);
            let score = match head {
                HeadKind::PreciseSigmoid => sigmoid(out.cls.at(item, s, i, j).f64()),
                HeadKind::Softmax => {
                    sigmoid(out.cls.at(item, k + s, i, j).f64() - out.cls.at(item, s, i, j).f64())
                }
            };
            let t = reg_vector(&out.reg, item, s, i, j);
            Detection {
                bbox: decode_box(anchor, &t),
                score,
                anchor: a,
            }
        })
        .collect())
}

fn reg_vector<T: Real>(reg: &Tensor<T>, n: usize, s: usize, i: usize, j: usize) -> [f64; 4] {
    let mut t = [0.0; 4];
    for (c, v) in t.iter_mut().enumerate() {
        *v = reg.at(n, 4 * s + c, i, j).f64();
    }
    t[2] = t[2].min(MAX_LOG_SCALE);
    t[3] = t[3].min(MAX_LOG_SCALE);
    t
}

pub fn top_k(dets: &[Detection], k: usize) -> Vec<Detection> {
    let mut v = dets.to_vec();
    v.sort_by(rank_order);
    v.truncate(k);
    v
}

/// Greedy NMS: keep the best remaining detection, drop every other with IoU
/// above `iou_threshold` against it, repeat. Output is in rank order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order = dets.to_vec();
    order.sort_by(rank_order);
    let mut suppressed = vec![false; order.len()];
    let mut keep = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        keep.push(order[i]);
        for j in i + 1..order.len() {
            if !suppressed[j] && iou(&order[i].bbox, &order[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Forward, decode, top-k, score floor, NMS for every image of the batch.
pub fn detect<T: Real>(
    net: &DetectorNet<T>,
    images: &Tensor<T>,
    anchors: &AnchorConfig,
    cfg: &InferenceConfig,
) -> Result<Vec<Vec<Detection>>> {
    cfg.validate()?;
    let out = net.forward(images)?;
    (0..images.batch())
        .map(|b| {
            let dets = decode_outputs(&out, b, anchors, net.head())?;
            let mut best = top_k(&dets, cfg.top_k);
            best.retain(|d| d.score >= cfg.score_floor);
            Ok(nms(&best, cfg.nms_threshold))
        })
        .collect()
}

/// CSV dump with header `image_id,x1,y1,x2,y2,score`.
pub fn detections_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a [Detection])>) -> String {
    let mut out = String::from("image_id,x1,y1,x2,y2,score\n");
    for (id, dets) in rows {
        for d in dets {
            let b = d.bbox;
            let _ = writeln!(out, "{id},{},{},{},{},{}", b.x1, b.y1, b.x2, b.y2, d.score);
        }
    }
    out
}
