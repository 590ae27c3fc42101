use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{DetectorNet, HeadKind, NetGrads};
use super::objective::{detection_loss, LossParts};
use super::sgd::{Sgd, SgdConfig};
use super::tensor::Tensor;
use crate::assignment::{assign, sample_minibatch, Assignment, LabelRule};
use crate::error::{Error, Result};
use crate::geometry::{generate_anchors, AnchorConfig, BBox};
use crate::loss::LossConfig;
use crate::num::Real;

/// One training image: a `[1, C, H, W]` tensor and its ground-truth boxes.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub image: Tensor<T>,
    pub gts: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Images per SGD step.
    pub batch_images: usize,
    /// Sampled anchors per image.
    pub minibatch_size: usize,
    pub max_pos_fraction: f64,
    pub force_best_match: bool,
    /// Iterations at which the learning rate is multiplied by 0.1.
    pub lr_steps: Vec<usize>,
    /// Rescale each step's gradient to at most this L2 norm.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            iterations: 1000,
            batch_images: 4,
            minibatch_size: crate::assignment::DEFAULT_BATCH_SIZE,
            max_pos_fraction: crate::assignment::DEFAULT_MAX_POS_FRACTION,
            force_best_match: true,
            lr_steps: Vec::new(),
            clip_grad_norm: None,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::invalid("momentum must lie in [0, 1) and weight_decay be >= 0"));
        }
        if self.batch_images == 0 || self.minibatch_size == 0 {
            return Err(Error::invalid("batch_images and minibatch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.max_pos_fraction) {
            return Err(Error::invalid("max_pos_fraction must lie in [0, 1]"));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("clip_grad_norm must be > 0"));
        }
        Ok(())
    }

    pub fn sgd_at(&self, iteration: usize) -> SgdConfig {
        let drops = self.lr_steps.iter().filter(|&&s| iteration >= s).count();
        SgdConfig {
            learning_rate: self.learning_rate * 0.1f64.powi(drops as i32),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub params: TrainParams,
    pub head: HeadKind,
    pub rule: LabelRule,
    pub loss: LossConfig,
    pub anchors: AnchorConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration,cls_loss,reg_loss,total\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.iteration, r.cls_loss, r.reg_loss, r.total);
    }
    out
}

/// Per-image labels for a dataset, checked against the net's output grid.
pub(crate) fn label_dataset<T: Real>(
    net: &DetectorNet<T>,
    data: &[TrainSample<T>],
    anchors: &AnchorConfig,
    rule: &LabelRule,
    force_best_match: bool,
) -> Result<Vec<Assignment>> {
    anchors.validate()?;
    rule.validate()?;
    if anchors.num_scales() != net.num_anchors() {
        return Err(Error::invalid(format!(
            "anchor config has {} scales, net predicts {}",
            anchors.num_scales(),
            net.num_anchors()
        )));
    }
    let boxes = generate_anchors(anchors);
    data.iter()
        .map(|s| {
            let (fh, fw) = net.output_dims(s.image.height(), s.image.width())?;
            if (fh, fw) != (anchors.feature_h, anchors.feature_w) {
                return Err(Error::shape(format!(
                    "net output {fh}x{fw} does not match the {}x{} anchor grid",
                    anchors.feature_h, anchors.feature_w
                )));
            }
            Ok(assign(&boxes, &s.gts, rule, force_best_match))
        })
        .collect()
}

pub(crate) struct Batch<'a, T> {
    pub images: Tensor<T>,
    pub assignments: Vec<&'a Assignment>,
    pub samples: Vec<Vec<usize>>,
}

pub(crate) fn draw_batch<'a, T: Real>(
    data: &[TrainSample<T>],
    labels: &'a [Assignment],
    params: &TrainParams,
    rng: &mut ChaCha8Rng,
) -> Result<Batch<'a, T>> {
    let picks = index::sample(rng, data.len(), params.batch_images.min(data.len())).into_vec();
    let images = Tensor::stack(&picks.iter().map(|&i| &data[i].image).collect::<Vec<_>>())?;
    let assignments: Vec<&Assignment> = picks.iter().map(|&i| &labels[i]).collect();
    let samples = assignments
        .iter()
        .map(|a| sample_minibatch(a, params.minibatch_size, params.max_pos_fraction, rng))
        .collect();
    Ok(Batch {
        images,
        assignments,
        samples,
    })
}

/// Divergence check plus optional clipping, applied to every step's gradient.
pub(crate) fn prepare_grads<T: Real>(iteration: usize, grads: &mut NetGrads<T>, params: &TrainParams) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::Diverged {
            iteration,
            loss: f64::NAN,
        });
    }
    if let Some(c) = params.clip_grad_norm {
        grads.clip_norm(c);
    }
    Ok(())
}

pub(crate) fn check_finite(iteration: usize, parts: &LossParts) -> Result<()> {
    if parts.total.is_finite() && parts.cls.is_finite() && parts.reg.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            iteration,
            loss: parts.total,
        })
    }
}

/// Trains `net` in place and returns the per-iteration loss trace.
///
/// Each iteration draws `batch_images` images, samples anchors from their
/// precomputed labels, evaluates the head's loss and takes one SGD step.
/// Aborts with [`Error::Diverged`] on a non-finite loss or gradient.
pub fn train<T: Real>(net: &mut DetectorNet<T>, data: &[TrainSample<T>], cfg: &TrainConfig) -> Result<Vec<TraceRow>> {
    cfg.params.validate()?;
    cfg.loss.validate()?;
    if cfg.head != net.head() {
        return Err(Error::invalid(format!(
            "config head {:?} does not match the net's {:?} head",
            cfg.head,
            net.head()
        )));
    }
    if cfg.params.iterations == 0 {
        return Ok(Vec::new());
    }
    if cfg.head == HeadKind::PreciseSigmoid {
        log::debug!("training a sigmoid head; start from a softmax-pretrained net for stable convergence");
    }
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let labels = label_dataset(net, data, &cfg.anchors, &cfg.rule, cfg.params.force_best_match)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(net);
    let mut trace = Vec::with_capacity(cfg.params.iterations);
    let k = net.num_anchors();
    for it in 0..cfg.params.iterations {
        let batch = draw_batch(data, &labels, &cfg.params, &mut rng)?;
        let out = net.forward_train(&batch.images)?;
        let (parts, d_cls, d_reg) =
            detection_loss(&out, cfg.head, k, &batch.assignments, &batch.samples, &cfg.loss)?;
        check_finite(it, &parts)?;
        let mut grads = net.backward(&d_cls, &d_reg)?;
        prepare_grads(it, &mut grads, &cfg.params)?;
        opt.step(net, &grads, &cfg.params.sgd_at(it))?;
        if it % 100 == 0 {
            log::debug!("iter {it}: cls {:.5} reg {:.5} total {:.5}", parts.cls, parts.reg, parts.total);
        }
        trace.push(TraceRow {
            iteration: it,
            cls_loss: parts.cls,
            reg_loss: parts.reg,
            total: parts.total,
        });
    }
    Ok(trace)
}
