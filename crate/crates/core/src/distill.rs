//! Training a channel-reduced student against a frozen teacher's output maps
//! plus the original labels.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::Assignment;
use crate::error::{Error, Result};
use crate::loss::{smooth_l1, LossConfig};
use crate::micronet::{
    check_finite, detection_loss, draw_batch, label_dataset, prepare_grads, DetectorNet, HeadKind, LossParts, NetOutput, Sgd,
    Tensor, TrainConfig, TrainSample,
};
use crate::num::{sigmoid, Real};

pub const DEFAULT_FACTOR: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    Fresh,
    /// Start from a student checkpoint trained on the labels alone.
    HalfTrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub factor: f64,
    pub w_distill_cls: f64,
    pub w_distill_reg: f64,
    pub w_orig: f64,
    pub iterations: usize,
    pub student_init: StudentInit,
    /// Match sigmoid scores instead of raw logits.
    pub match_post_sigmoid: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            factor: DEFAULT_FACTOR,
            w_distill_cls: 1.0,
            w_distill_reg: 1.0,
            w_orig: 1.0,
            iterations: 1000,
            student_init: StudentInit::Fresh,
            match_post_sigmoid: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::invalid(format!("distill factor must lie in (0, 1), got {}", self.factor)));
        }
        let w = [self.w_distill_cls, self.w_distill_reg, self.w_orig];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("distill weights must be finite and >= 0"));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::invalid("at least one distill weight must be positive"));
        }
        Ok(())
    }
}

/// Student with every backbone layer's width scaled by `factor` (rounded up)
/// and the teacher's head outputs, freshly initialized from `seed`.
pub fn shrink_model<T: Real>(teacher: &DetectorNet<T>, factor: f64, seed: u64) -> Result<DetectorNet<T>> {
    teacher.shrunk(factor, seed)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DistillParts {
    pub distill_cls: f64,
    pub distill_reg: f64,
    pub orig: LossParts,
    pub total: f64,
}

/// Labels and sampled anchors for the original-label term.
pub struct OrigTerm<'a> {
    pub head: HeadKind,
    pub num_anchors: usize,
    pub assignments: &'a [&'a Assignment],
    pub samples: &'a [Vec<usize>],
    pub loss: &'a LossConfig,
}

/// Mixed distillation loss and its gradients w.r.t. the student's maps.
///
/// `w_distill_cls * L2(cls) / M + w_distill_reg * SmoothL1(reg) / M + w_orig * orig`
/// where `M` is the element count of the map in question.
pub fn distill_loss<T: Real>(
    student: &NetOutput<T>,
    teacher: &NetOutput<T>,
    orig: &OrigTerm<'_>,
    cfg: &DistillConfig,
) -> Result<(DistillParts, Tensor<T>, Tensor<T>)> {
    if student.cls.shape() != teacher.cls.shape() || student.reg.shape() != teacher.reg.shape() {
        return Err(Error::shape(format!(
            "student maps {:?}/{:?} differ from teacher maps {:?}/{:?}",
            student.cls.shape(),
            student.reg.shape(),
            teacher.cls.shape(),
            teacher.reg.shape()
        )));
    }
    let m_cls = student.cls.len();
    let inv_m = T::one() / T::of(m_cls as f64);
    let wc = T::of(cfg.w_distill_cls);
    let mut l2 = T::zero();
    let mut d_cls = Tensor::zeros(student.cls.shape());
    for ((g, &s), &t) in d_cls.data_mut().iter_mut().zip(student.cls.data()).zip(teacher.cls.data()) {
        let (d, chain) = if cfg.match_post_sigmoid {
            let ss = sigmoid(s);
            (ss - sigmoid(t), ss * (T::one() - ss))
        } else {
            (s - t, T::one())
        };
        l2 += d * d;
        *g = wc * d * chain * inv_m;
    }
    let l2 = (l2 * T::of(0.5) * inv_m).f64();

    let (sl1, reg_grad) = smooth_l1(
        student.reg.data(),
        teacher.reg.data(),
        T::of(orig.loss.smooth_l1_delta),
        student.reg.len(),
    )?;
    let wr = T::of(cfg.w_distill_reg);
    let mut d_reg = Tensor::from_vec(student.reg.shape(), reg_grad.into_iter().map(|g| wr * g).collect())?;

    let mut parts = DistillParts {
        distill_cls: l2,
        distill_reg: sl1.f64(),
        ..Default::default()
    };
    if cfg.w_orig > 0.0 {
        let (o, oc, or) = detection_loss(student, orig.head, orig.num_anchors, orig.assignments, orig.samples, orig.loss)?;
        let wo = T::of(cfg.w_orig);
        for (g, v) in d_cls.data_mut().iter_mut().zip(oc.data()) {
            *g += wo * *v;
        }
        for (g, v) in d_reg.data_mut().iter_mut().zip(or.data()) {
            *g += wo * *v;
        }
        parts.orig = o;
    }
    parts.total = cfg.w_distill_cls * parts.distill_cls + cfg.w_distill_reg * parts.distill_reg + cfg.w_orig * parts.orig.total;
    Ok((parts, d_cls, d_reg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillTraceRow {
    pub iteration: usize,
    pub distill_cls: f64,
    pub distill_reg: f64,
    pub orig: f64,
    pub total: f64,
}

pub fn distill_trace_csv(rows: &[DistillTraceRow]) -> String {
    let mut out = String::from("iteration,distill_cls,distill_reg,orig,total\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.iteration, r.distill_cls, r.distill_reg, r.orig, r.total);
    }
    out
}

/// Trains `student` for `cfg.iterations` steps against the frozen `teacher`.
///
/// Optimizer settings, labels and batch sampling come from `train`; its
/// iteration count is ignored. The teacher's checksum is compared before and
/// after.
pub fn distill_train<T: Real>(
    teacher: &DetectorNet<T>,
    student: &mut DetectorNet<T>,
    data: &[TrainSample<T>],
    train: &TrainConfig,
    cfg: &DistillConfig,
) -> Result<Vec<DistillTraceRow>> {
    cfg.validate()?;
    train.params.validate()?;
    train.loss.validate()?;
    if teacher.head() != student.head() || teacher.num_anchors() != student.num_anchors() {
        return Err(Error::invalid("teacher and student heads differ"));
    }
    if train.head != student.head() {
        return Err(Error::invalid("config head does not match the student's head"));
    }
    if cfg.iterations == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let before = teacher.checksum();
    let labels = label_dataset(student, data, &train.anchors, &train.rule, train.params.force_best_match)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut opt = Sgd::new(student);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = draw_batch(data, &labels, &train.params, &mut rng)?;
        let t_out = teacher.forward(&batch.images)?;
        let s_out = student.forward_train(&batch.images)?;
        let orig = OrigTerm {
            head: train.head,
            num_anchors: student.num_anchors(),
            assignments: &batch.assignments,
            samples: &batch.samples,
            loss: &train.loss,
        };
        let (parts, d_cls, d_reg) = distill_loss(&s_out, &t_out, &orig, cfg)?;
        check_finite(
            it,
            &LossParts {
                cls: parts.distill_cls,
                reg: parts.distill_reg,
                total: parts.total,
            },
        )?;
        let mut grads = student.backward(&d_cls, &d_reg)?;
        prepare_grads(it, &mut grads, &train.params)?;
        opt.step(student, &grads, &train.params.sgd_at(it))?;
        trace.push(DistillTraceRow {
            iteration: it,
            distill_cls: parts.distill_cls,
            distill_reg: parts.distill_reg,
            orig: parts.orig.total,
            total: parts.total,
        });
    }
    let after = teacher.checksum();
    assert_eq!(before, after, "teacher parameters changed during distillation");
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::assignment::{assign, LabelRule};
    use crate::geometry::{generate_anchors, AnchorConfig, BBox};
    use crate::gradcheck::{central_difference, max_rel_error};
    use crate::micronet::{NetConfig, TrainParams};

    fn random_maps(rng: &mut ChaCha8Rng, k: usize, n: usize) -> NetOutput<f64> {
        let mut t = |c| {
            let shape = [n, c, 2, 3];
            let len = shape.iter().product();
            Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
        };
        NetOutput { cls: t(k), reg: t(4 * k) }
    }

    fn labels() -> (AnchorConfig, Assignment) {
        let cfg = AnchorConfig::new(3, 2, 8.0, vec![1.0, 2.0]).unwrap();
        let gts = [BBox::new(4.0, 2.0, 14.0, 12.0).unwrap()];
        let a = assign(&generate_anchors(&cfg), &gts, &"pos0.4+split_0.4_0.8_0.5_0.9".parse::<LabelRule>().unwrap(), true);
        (cfg, a)
    }

    #[test]
    fn identical_maps_without_labels_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_maps(&mut rng, 2, 1);
        let (_, a) = labels();
        let samples = vec![(0..a.len()).collect::<Vec<_>>()];
        let loss = LossConfig::default();
        let orig = OrigTerm {
            head: HeadKind::PreciseSigmoid,
            num_anchors: 2,
            assignments: &[&a],
            samples: &samples,
            loss: &loss,
        };
        let cfg = DistillConfig {
            w_orig: 0.0,
            ..DistillConfig::default()
        };
        let (p, dc, dr) = distill_loss(&m, &m, &orig, &cfg).unwrap();
        assert_eq!(p.total, 0.0);
        assert!(dc.data().iter().chain(dr.data()).all(|v| *v == 0.0));
    }

    #[test]
    fn zero_distill_weights_reduce_to_detection_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (s, t) = (random_maps(&mut rng, 2, 1), random_maps(&mut rng, 2, 1));
        let (_, a) = labels();
        let samples = vec![(0..a.len()).collect::<Vec<_>>()];
        let loss = LossConfig::default();
        let orig = OrigTerm {
            head: HeadKind::PreciseSigmoid,
            num_anchors: 2,
            assignments: &[&a],
            samples: &samples,
            loss: &loss,
        };
        let cfg = DistillConfig {
            w_distill_cls: 0.0,
            w_distill_reg: 0.0,
            ..DistillConfig::default()
        };
        let (p, dc, dr) = distill_loss(&s, &t, &orig, &cfg).unwrap();
        let (o, oc, or) = detection_loss(&s, HeadKind::PreciseSigmoid, 2, &[&a], &samples, &loss).unwrap();
        assert_eq!(p.total, o.total);
        assert_eq!((dc, dr), (oc, or));
    }

    #[test]
    fn weights_scale_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s, t) = (random_maps(&mut rng, 2, 1), random_maps(&mut rng, 2, 1));
        let (_, a) = labels();
        let samples = vec![(0..a.len()).collect::<Vec<_>>()];
        let loss = LossConfig::default();
        let orig = OrigTerm {
            head: HeadKind::PreciseSigmoid,
            num_anchors: 2,
            assignments: &[&a],
            samples: &samples,
            loss: &loss,
        };
        let base = DistillConfig {
            w_distill_cls: 0.7,
            w_distill_reg: 1.3,
            w_orig: 0.2,
            ..DistillConfig::default()
        };
        let scaled = DistillConfig {
            w_distill_cls: 2.1,
            w_distill_reg: 3.9,
            w_orig: 0.6,
            ..base.clone()
        };
        let a1 = distill_loss(&s, &t, &orig, &base).unwrap().0.total;
        let a3 = distill_loss(&s, &t, &orig, &scaled).unwrap().0.total;
        assert!((a3 - 3.0 * a1).abs() < 1e-12 * a3.abs().max(1.0));
    }

    #[test]
    fn gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, a) = labels();
        let samples = vec![(0..a.len()).collect::<Vec<_>>()];
        let loss = LossConfig {
            lambda: 3.0,
            ..LossConfig::default()
        };
        for post in [false, true] {
            let (s, t) = (random_maps(&mut rng, 2, 1), random_maps(&mut rng, 2, 1));
            let orig = OrigTerm {
                head: HeadKind::PreciseSigmoid,
                num_anchors: 2,
                assignments: &[&a],
                samples: &samples,
                loss: &loss,
            };
            let cfg = DistillConfig {
                match_post_sigmoid: post,
                ..DistillConfig::default()
            };
            let (_, dc, _) = distill_loss(&s, &t, &orig, &cfg).unwrap();
            let fd = central_difference(s.cls.data(), 1e-5, |v| {
                let m = NetOutput {
                    cls: Tensor::from_vec(s.cls.shape(), v.to_vec()).unwrap(),
                    reg: s.reg.clone(),
                };
                distill_loss(&m, &t, &orig, &cfg).unwrap().0.total
            });
            assert!(max_rel_error(dc.data(), &fd) < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s, t) = (random_maps(&mut rng, 2, 1), random_maps(&mut rng, 2, 2));
        let (_, a) = labels();
        let loss = LossConfig::default();
        let orig = OrigTerm {
            head: HeadKind::PreciseSigmoid,
            num_anchors: 2,
            assignments: &[&a],
            samples: &[vec![]],
            loss: &loss,
        };
        let err = distill_loss(&s, &t, &orig, &DistillConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        for bad in [
            DistillConfig { factor: 1.0, ..DistillConfig::default() },
            DistillConfig { factor: 0.0, ..DistillConfig::default() },
            DistillConfig { w_orig: -1.0, ..DistillConfig::default() },
            DistillConfig { w_orig: 0.0, w_distill_cls: 0.0, w_distill_reg: 0.0, ..DistillConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn tiny_setup() -> (DetectorNet<f32>, Vec<TrainSample<f32>>, TrainConfig) {
        let net_cfg = NetConfig {
            channels: vec![8, 8],
            total_stride: 4,
            num_anchors: 2,
            head: HeadKind::PreciseSigmoid,
            ..NetConfig::default()
        };
        let teacher = DetectorNet::new(net_cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = (0..3)
            .map(|_| TrainSample {
                image: Tensor::from_vec([1, 1, 16, 16], (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
                gts: vec![BBox::from_center(8.0, 8.0, 8.0, 8.0)],
            })
            .collect();
        let train = TrainConfig {
            params: TrainParams {
                batch_images: 2,
                minibatch_size: 16,
                ..TrainParams::default()
            },
            head: HeadKind::PreciseSigmoid,
            rule: "pos0.4+split_0.4_0.8_0.5_0.9".parse().unwrap(),
            loss: LossConfig::default(),
            anchors: AnchorConfig::new(4, 4, 4.0, vec![2.0, 3.0]).unwrap(),
            seed: 1,
        };
        (teacher, data, train)
    }

    #[test]
    fn shrink_quarter_width() {
        let (teacher, ..) = tiny_setup();
        let s = shrink_model(&teacher, 0.25, 1).unwrap();
        assert_eq!(s.config().layer_channels(), vec![2, 2]);
        assert_eq!(s.cls_head.out_channels, teacher.cls_head.out_channels);
        assert_eq!(s.reg_head.out_channels, teacher.reg_head.out_channels);
    }

    #[test]
    fn training_leaves_teacher_untouched() {
        let (teacher, data, train) = tiny_setup();
        let snapshot = teacher.clone();
        let mut student = shrink_model(&teacher, 0.5, 2).unwrap();
        let initial = student.clone();
        let none = DistillConfig {
            iterations: 0,
            ..DistillConfig::default()
        };
        assert!(distill_train(&teacher, &mut student, &data, &train, &none).unwrap().is_empty());
        assert_eq!(student, initial);
        let cfg = DistillConfig {
            iterations: 5,
            ..DistillConfig::default()
        };
        let trace = distill_train(&teacher, &mut student, &data, &train, &cfg).unwrap();
        assert_eq!(trace.len(), 5);
        assert_ne!(student, initial);
        assert_eq!(teacher.checksum(), snapshot.checksum());
        assert!(distill_trace_csv(&trace).starts_with("iteration,distill_cls,distill_reg,orig,total\n0,"));
    }
}
