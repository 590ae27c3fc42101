//! End-to-end recipes: optional softmax pretraining with a head switch,
//! training, whole-dataset loss and detection evaluation.

use serde::{Deserialize, Serialize};

use crate::assignment::{LabelRule, DEFAULT_BOUND_NEG};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::eval::{evaluate, scaled_budget, EvalResult, DEFAULT_FP_BUDGETS, DEFAULT_IOU_MIN};
use crate::geometry::AnchorConfig;
use crate::inference::{detect, Detection, InferenceConfig};
use crate::loss::LossConfig;
use crate::micronet::{
    detection_loss, label_dataset, train, DetectorNet, HeadKind, LossParts, NetConfig, Tensor, TraceRow,
    TrainConfig, TrainParams, TrainSample,
};
use crate::num::Real;

fn default_pretrain_rule() -> LabelRule {
    LabelRule::binary(0.7, DEFAULT_BOUND_NEG).expect("valid bounds")
}

/// Softmax warm-up before a sigmoid head takes over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pretrain {
    pub iterations: usize,
    #[serde(default = "default_pretrain_rule")]
    pub rule: LabelRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub net: NetConfig,
    pub anchors: AnchorConfig,
    pub rule: LabelRule,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainParams,
    /// Only meaningful for a sigmoid head.
    #[serde(default)]
    pub pretrain: Option<Pretrain>,
}

impl Recipe {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.anchors.validate()?;
        self.rule.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.anchors.num_scales() != self.net.num_anchors {
            return Err(Error::invalid(format!(
                "{} anchor scales but the net predicts {} anchors per cell",
                self.anchors.num_scales(),
                self.net.num_anchors
            )));
        }
        if self.pretrain.is_some() && self.net.head != HeadKind::PreciseSigmoid {
            return Err(Error::invalid("pretrain applies only to a precise_sigmoid head"));
        }
        Ok(())
    }

    pub fn train_config(&self, head: HeadKind, rule: &LabelRule, iterations: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            params: TrainParams {
                iterations,
                ..self.train.clone()
            },
            head,
            rule: *rule,
            loss: self.loss,
            anchors: self.anchors.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub net: DetectorNet<T>,
    /// Softmax phase, empty without pretraining.
    pub pretrain_trace: Vec<TraceRow>,
    pub trace: Vec<TraceRow>,
}

/// Trains a fresh net per `recipe`. A sigmoid head with `pretrain` first
/// trains a softmax twin, switches heads, then continues on the recipe's rule.
/// `init` replaces the fresh net (and skips pretraining) when given.
pub fn train_recipe<T: Real>(
    recipe: &Recipe,
    data: &[TrainSample<T>],
    seed: u64,
    init: Option<DetectorNet<T>>,
) -> Result<Trained<T>> {
    recipe.validate()?;
    let head = recipe.net.head;
    let mut pretrain_trace = Vec::new();
    let mut net = match (init, &recipe.pretrain) {
        (Some(net), _) => net,
        (None, Some(p)) => {
            let mut soft = DetectorNet::new(
                NetConfig {
                    head: HeadKind::Softmax,
                    ..recipe.net.clone()
                },
                seed,
            )?;
            let cfg = recipe.train_config(HeadKind::Softmax, &p.rule, p.iterations, seed);
            pretrain_trace = train(&mut soft, data, &cfg)?;
            soft.switch_head_softmax_to_sigmoid()?
        }
        (None, None) => {
            if head == HeadKind::PreciseSigmoid {
                log::warn!("precise_sigmoid head without softmax pretraining may not converge");
            }
            DetectorNet::new(recipe.net.clone(), seed)?
        }
    };
    let cfg = recipe.train_config(head, &recipe.rule, recipe.train.iterations, seed.wrapping_add(1));
    let trace = train(&mut net, data, &cfg)?;
    Ok(Trained {
        net,
        pretrain_trace,
        trace,
    })
}

/// Mean loss over every labeled anchor of every image, one image at a time.
pub fn dataset_loss<T: Real>(
    net: &DetectorNet<T>,
    data: &[TrainSample<T>],
    anchors: &AnchorConfig,
    rule: &LabelRule,
    loss: &LossConfig,
    force_best_match: bool,
) -> Result<LossParts> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let labels = label_dataset(net, data, anchors, rule, force_best_match)?;
    let mut acc = LossParts::default();
    for (s, a) in data.iter().zip(&labels) {
        let out = net.forward(&s.image)?;
        let all = vec![(0..a.len()).collect::<Vec<_>>()];
        let (p, _, _) = detection_loss(&out, net.head(), net.num_anchors(), &[a], &all, loss)?;
        acc.cls += p.cls;
        acc.reg += p.reg;
        acc.total += p.total;
    }
    let n = data.len() as f64;
    Ok(LossParts {
        cls: acc.cls / n,
        reg: acc.reg / n,
        total: acc.total / n,
    })
}

/// Detections for every scene, batched.
pub fn detect_scenes<T: Real>(
    net: &DetectorNet<T>,
    scenes: &[Scene],
    anchors: &AnchorConfig,
    inference: &InferenceConfig,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(16) {
        let tensors: Vec<Tensor<T>> = chunk.iter().map(|s| s.image.to_tensor()).collect();
        let batch = Tensor::stack(&tensors.iter().collect::<Vec<_>>())?;
        out.extend(detect(net, &batch, anchors, inference)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub iou_min: f64,
    pub fp_budgets: Vec<usize>,
    /// Rescale `fp_budgets` to the evaluated set's gt count.
    pub scale_budgets: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            iou_min: DEFAULT_IOU_MIN,
            fp_budgets: DEFAULT_FP_BUDGETS.to_vec(),
            scale_budgets: true,
        }
    }
}

impl EvalSettings {
    pub fn budgets_for(&self, total_gts: usize) -> Vec<usize> {
        self.fp_budgets
            .iter()
            .map(|&b| if self.scale_budgets { scaled_budget(b, total_gts) } else { b })
            .collect()
    }
}

pub fn evaluate_scenes(dets: &[Vec<Detection>], scenes: &[Scene], settings: &EvalSettings) -> Result<EvalResult> {
    let gts: Vec<_> = scenes.iter().map(|s| s.gts.clone()).collect();
    let total = gts.iter().map(Vec::len).sum();
    evaluate(dets, &gts, settings.iou_min, &settings.budgets_for(total))
}

pub fn evaluate_net<T: Real>(
    net: &DetectorNet<T>,
    scenes: &[Scene],
    anchors: &AnchorConfig,
    inference: &InferenceConfig,
    settings: &EvalSettings,
) -> Result<EvalResult> {
    let dets = detect_scenes(net, scenes, anchors, inference)?;
    evaluate_scenes(&dets, scenes, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_scene, to_samples, SceneSpec};

    fn recipe(head: HeadKind, pretrain: Option<Pretrain>) -> Recipe {
        Recipe {
            net: NetConfig {
                channels: vec![4, 8],
                total_stride: 4,
                num_anchors: 2,
                head,
                ..NetConfig::default()
            },
            anchors: AnchorConfig::new(8, 8, 4.0, vec![3.0, 5.0]).unwrap(),
            rule: "pos0.4+split_0.4_0.8_0.5_0.9".parse().unwrap(),
            loss: LossConfig::default(),
            train: TrainParams {
                iterations: 3,
                batch_images: 2,
                minibatch_size: 32,
                ..TrainParams::default()
            },
            pretrain,
        }
    }

    fn scenes(n: u64) -> Vec<Scene> {
        let spec = SceneSpec {
            width: 32,
            height: 32,
            min_size: 10,
            max_size: 16,
            ..SceneSpec::default()
        };
        (0..n).map(|s| gen_scene(s, &spec).unwrap()).collect()
    }

    #[test]
    fn pretrain_then_switch() {
        let r = recipe(
            HeadKind::PreciseSigmoid,
            Some(Pretrain {
                iterations: 2,
                rule: default_pretrain_rule(),
            }),
        );
        let data = to_samples::<f32>(&scenes(4));
        let t = train_recipe(&r, &data, 0, None).unwrap();
        assert_eq!((t.pretrain_trace.len(), t.trace.len()), (2, 3));
        assert_eq!(t.net.head(), HeadKind::PreciseSigmoid);
        let again = train_recipe(&r, &data, 0, None).unwrap();
        assert_eq!(t.net, again.net);
    }

    #[test]
    fn recipe_validation() {
        let mut r = recipe(HeadKind::Softmax, Some(Pretrain { iterations: 1, rule: default_pretrain_rule() }));
        assert!(r.validate().is_err());
        r.pretrain = None;
        r.anchors.scales.push(7.0);
        assert!(r.validate().is_err());
    }

    #[test]
    fn evaluation_runs() {
        let r = recipe(HeadKind::Softmax, None);
        let sc = scenes(3);
        let t = train_recipe(&r, &to_samples::<f32>(&sc), 1, None).unwrap();
        let res = evaluate_net(&t.net, &sc, &r.anchors, &InferenceConfig::default(), &EvalSettings::default()).unwrap();
        assert_eq!(res.matches.len(), 3);
        assert!((0.0..=1.0).contains(&res.ap));
        let l = dataset_loss(&t.net, &to_samples(&sc), &r.anchors, &r.rule, &r.loss, true).unwrap();
        assert!(l.total.is_finite());
    }
}
