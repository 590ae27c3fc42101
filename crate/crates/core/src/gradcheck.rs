//! Finite-difference verification of every hand-written gradient.

use std::fmt;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assignment::{assign, Assignment, LabelRule};
use crate::distill::{distill_loss, DistillConfig, OrigTerm};
use crate::error::Result;
use crate::geometry::{generate_anchors, AnchorConfig, BBox};
use crate::loss::{precise_sigmoid_loss, smooth_l1, softmax_ce, LossConfig};
use crate::micronet::{
    anchor_slot, detection_loss, Conv2d, ConvGrad, DetectorNet, HeadKind, NetConfig, NetOutput, Tensor,
};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
/// Smallest denominator of the relative error, as a fraction of
/// `max(1, |f|)`. Central differences carry roughly `eps * |f| / h` of
/// rounding noise, so coordinates with gradients far below that cannot be
/// resolved to a relative tolerance.
pub const REL_FLOOR: f64 = 1e-4;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            v[i] = x[i] + h;
            let up = f(&v);
            v[i] = x[i] - h;
            let down = f(&v);
            v[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest [`rel_error`] over paired slices with the default floor.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_error(*a, *n, REL_FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per layer per network trial.
    pub coords_per_layer: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            trials: 100,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            coords_per_layer: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub coords: usize,
    /// Coordinates skipped because a kink (ReLU or smooth L1) lay within the step.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<22} trials={:<4} coords={:<6} skipped={:<3} max_rel_err={:.3e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.trials,
                c.coords,
                c.skipped,
                c.max_rel_error
            )?;
        }
        write!(f, "tolerance {:.0e}, {:.2}s", self.tolerance, self.seconds)
    }
}

#[derive(Default)]
struct Tally {
    trials: usize,
    coords: usize,
    skipped: usize,
    worst: f64,
}

impl Tally {
    fn finish(self, name: &str, tol: f64) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            trials: self.trials,
            coords: self.coords,
            skipped: self.skipped,
            max_rel_error: self.worst,
            passed: self.worst <= tol && self.coords > 0,
        }
    }
}

/// Compares `analytic[i]` with a central difference for each `i` in
/// `coords`. A coordinate is skipped when `regime` (kink indicators) differs
/// between `x` and either `x ± h`.
fn check_coords(
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    tally: &mut Tally,
    mut f: impl FnMut(&[f64]) -> f64,
    mut regime: impl FnMut(&[f64]) -> Vec<bool>,
) {
    let f0 = f(x);
    let floor = REL_FLOOR * f0.abs().max(1.0);
    let base = regime(x);
    let mut v = x.to_vec();
    for &i in coords {
        v[i] = x[i] + h;
        let (up, r_up) = (f(&v), regime(&v));
        v[i] = x[i] - h;
        let (down, r_down) = (f(&v), regime(&v));
        v[i] = x[i];
        if r_up != base || r_down != base {
            tally.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        tally.coords += 1;
        tally.worst = tally.worst.max(rel_error(analytic[i], numeric, floor));
    }
}

fn no_kinks(_: &[f64]) -> Vec<bool> {
    Vec::new()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn check_softmax(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut t = Tally::default();
    for _ in 0..cfg.trials {
        let (rows, classes) = (rng.gen_range(1..=6), rng.gen_range(2..=4));
        let x = uniform(rng, rows * classes, -4.0, 4.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
        let (_, g) = softmax_ce(&x, classes, &labels)?;
        let all: Vec<usize> = (0..x.len()).collect();
        let f = |v: &[f64]| softmax_ce(v, classes, &labels).map(|r| r.0).unwrap_or(f64::NAN);
        check_coords(&x, &g, &all, cfg.step, &mut t, f, no_kinks);
        t.trials += 1;
    }
    Ok(t.finish("softmax_ce", cfg.tolerance))
}

fn check_precise_sigmoid(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut t = Tally::default();
    for _ in 0..cfg.trials {
        let n = rng.gen_range(1..=16);
        let x = uniform(rng, n, -5.0, 5.0);
        let y = uniform(rng, n, 0.0, 1.0);
        let (_, g) = precise_sigmoid_loss(&x, &y)?;
        let all: Vec<usize> = (0..n).collect();
        let f = |v: &[f64]| precise_sigmoid_loss(v, &y).map(|r| r.0).unwrap_or(f64::NAN);
        check_coords(&x, &g, &all, cfg.step, &mut t, f, no_kinks);
        t.trials += 1;
    }
    Ok(t.finish("precise_sigmoid_loss", cfg.tolerance))
}

fn l1_regime(pred: &[f64], target: &[f64], delta: f64) -> Vec<bool> {
    pred.iter().zip(target).map(|(p, t)| (p - t).abs() < delta).collect()
}

fn check_smooth_l1(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut t = Tally::default();
    for _ in 0..cfg.trials {
        let n = rng.gen_range(1..=16);
        let delta = if rng.gen_bool(0.5) { 1.0 } else { rng.gen_range(0.3..2.0) };
        let x = uniform(rng, n, -3.0, 3.0);
        let y = uniform(rng, n, -3.0, 3.0);
        let norm = rng.gen_range(1..=5);
        let (_, g) = smooth_l1(&x, &y, delta, norm)?;
        let all: Vec<usize> = (0..n).collect();
        let f = |v: &[f64]| smooth_l1(v, &y, delta, norm).map(|r| r.0).unwrap_or(f64::NAN);
        check_coords(&x, &g, &all, cfg.step, &mut t, f, |v| l1_regime(v, &y, delta));
        t.trials += 1;
    }
    Ok(t.finish("smooth_l1", cfg.tolerance))
}

/// Single convolution under the loss `sum(r * conv(x))`: weight, bias and
/// input gradients.
fn check_conv(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut t = Tally::default();
    for _ in 0..cfg.trials {
        let kernel = if rng.gen_bool(0.5) { 1 } else { 3 };
        let padding = if kernel == 3 { rng.gen_range(0..=1) } else { 0 };
        let stride = rng.gen_range(1..=2);
        let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
        let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(4..=7), rng.gen_range(4..=7));
        let mut conv = Conv2d::<f64>::zeros(ci, co, kernel, stride, padding);
        conv.weight = uniform(rng, conv.weight.len(), -1.0, 1.0);
        conv.bias = uniform(rng, co, -1.0, 1.0);
        let x = Tensor::from_vec([n, ci, h, w], uniform(rng, n * ci * h * w, -1.0, 1.0))?;
        let out_shape = conv.forward(&x)?.shape();
        let r = Tensor::from_vec(out_shape, uniform(rng, out_shape.iter().product(), -1.0, 1.0))?;
        let dot = |o: &Tensor<f64>| o.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();

        let mut grad = ConvGrad::zeros_like(&conv);
        let dx = conv.backward(&x, &r, &mut grad, true)?.expect("input grad requested");
        let nw = conv.weight.len();
        let mut params = conv.weight.clone();
        params.extend(&conv.bias);
        let mut analytic = grad.weight.clone();
        analytic.extend(&grad.bias);
        let all: Vec<usize> = (0..params.len()).collect();
        let f = |p: &[f64]| {
            let mut c = conv.clone();
            c.weight.copy_from_slice(&p[..nw]);
            c.bias.copy_from_slice(&p[nw..]);
            c.forward(&x).map(|o| dot(&o)).unwrap_or(f64::NAN)
        };
        check_coords(&params, &analytic, &all, cfg.step, &mut t, f, no_kinks);

        let all: Vec<usize> = (0..x.len()).collect();
        let f = |v: &[f64]| {
            let xv = Tensor::from_vec(x.shape(), v.to_vec()).expect("same shape");
            conv.forward(&xv).map(|o| dot(&o)).unwrap_or(f64::NAN)
        };
        check_coords(x.data(), dx.data(), &all, cfg.step, &mut t, f, no_kinks);
        t.trials += 1;
    }
    Ok(t.finish("conv2d", cfg.tolerance))
}

struct NetCase {
    net: DetectorNet<f64>,
    x: Tensor<f64>,
    assignments: Vec<Assignment>,
    samples: Vec<Vec<usize>>,
    loss: LossConfig,
}

impl NetCase {
    fn random(rng: &mut ChaCha8Rng, head: HeadKind) -> Result<Self> {
        let config = NetConfig {
            channels: vec![4, 6, 8],
            total_stride: 4,
            num_anchors: 2,
            head,
            ..NetConfig::default()
        };
        let mut net = DetectorNet::<f64>::zeros(config)?;
        for conv in net.layers_mut() {
            let std = (2.0 / conv.fan_in() as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            conv.weight.iter_mut().for_each(|w| *w = dist.sample(rng));
            conv.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
        let batch = rng.gen_range(1..=2);
        let x = Tensor::from_vec([batch, 1, 16, 16], uniform(rng, batch * 256, -2.0, 2.0))?;
        let anchors = generate_anchors(&AnchorConfig::new(4, 4, 4.0, vec![1.5, 3.0])?);
        let rule: LabelRule = match head {
            HeadKind::Softmax => "pos0.7+all=1",
            HeadKind::PreciseSigmoid => "pos0.4+split_0.4_0.8_0.5_0.9",
        }
        .parse()?;
        let mut assignments = Vec::new();
        let mut samples = Vec::new();
        for _ in 0..batch {
            let gts: Vec<BBox> = (0..rng.gen_range(1..=2))
                .map(|_| {
                    let s = rng.gen_range(4.0..10.0);
                    BBox::from_center(rng.gen_range(3.0..13.0), rng.gen_range(3.0..13.0), s, s * rng.gen_range(0.8..1.2))
                })
                .collect();
            let a = assign(&anchors, &gts, &rule, true);
            let pick = index::sample(rng, a.len(), 20).into_vec();
            samples.push(pick);
            assignments.push(a);
        }
        let loss = LossConfig {
            lambda: rng.gen_range(1.0..300.0),
            smooth_l1_delta: 1.0,
        };
        Ok(NetCase {
            net,
            x,
            assignments,
            samples,
            loss,
        })
    }

    fn refs(&self) -> Vec<&Assignment> {
        self.assignments.iter().collect()
    }

    fn with_params(&self, p: &[f64]) -> DetectorNet<f64> {
        let mut net = self.net.clone();
        net.set_flat_params(p).expect("same parameter count");
        net
    }

    fn loss_of(&self, out: &NetOutput<f64>) -> f64 {
        detection_loss(out, self.net.head(), 2, &self.refs(), &self.samples, &self.loss)
            .map(|r| r.0.total)
            .unwrap_or(f64::NAN)
    }

    /// ReLU signs plus smooth L1 regime of every sampled positive's residual.
    fn regime(&self, net: &DetectorNet<f64>) -> Vec<bool> {
        let mut r = net.relu_pattern(&self.x).expect("valid input");
        let out = net.forward(&self.x).expect("valid input");
        let fw = out.reg.width();
        for (b, (a, s)) in self.assignments.iter().zip(&self.samples).enumerate() {
            for &i in s {
                if let (true, Some(t)) = (a.labels[i].is_positive(), a.targets[i]) {
                    let (k, y, x) = anchor_slot(i, 2, fw);
                    for (c, tc) in t.iter().enumerate() {
                        r.push((out.reg.at(b, 4 * k + c, y, x) - tc).abs() < self.loss.smooth_l1_delta);
                    }
                }
            }
        }
        r
    }
}

/// Full detector with the detection loss: per-layer parameter gradients.
fn check_network(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let names: Vec<String> = NetCase::random(&mut rng.clone(), HeadKind::Softmax)?
        .net
        .layers()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut per_layer: Vec<Tally> = names.iter().map(|_| Tally::default()).collect();
    let mut total = Tally::default();
    for trial in 0..cfg.trials {
        let head = if trial % 2 == 0 { HeadKind::PreciseSigmoid } else { HeadKind::Softmax };
        let mut case = NetCase::random(rng, head)?;
        let out = case.net.forward_train(&case.x)?;
        let (_, d_cls, d_reg) = detection_loss(&out, head, 2, &case.refs(), &case.samples, &case.loss)?;
        let grads = case.net.backward(&d_cls, &d_reg)?;
        let analytic = grads.flatten();
        let params = case.net.flat_params();
        let mut offset = 0;
        for (l, (_, conv)) in case.net.layers().iter().enumerate() {
            let len = conv.weight.len() + conv.bias.len();
            let coords: Vec<usize> = index::sample(rng, len, cfg.coords_per_layer.min(len))
                .into_iter()
                .map(|i| offset + i)
                .collect();
            let mut layer = Tally::default();
            check_coords(
                &params,
                &analytic,
                &coords,
                cfg.step,
                &mut layer,
                |p| {
                    let net = case.with_params(p);
                    net.forward(&case.x).map(|o| case.loss_of(&o)).unwrap_or(f64::NAN)
                },
                |p| case.regime(&case.with_params(p)),
            );
            total.coords += layer.coords;
            total.skipped += layer.skipped;
            total.worst = total.worst.max(layer.worst);
            let acc = &mut per_layer[l];
            acc.coords += layer.coords;
            acc.skipped += layer.skipped;
            acc.worst = acc.worst.max(layer.worst);
            acc.trials += 1;
            offset += len;
        }
        total.trials += 1;
    }
    let mut out: Vec<CheckResult> = names
        .iter()
        .zip(per_layer)
        .map(|(n, t)| t.finish(&format!("layer {n}"), cfg.tolerance))
        .collect();
    out.push(total.finish("end_to_end", cfg.tolerance));
    Ok(out)
}

fn check_distill(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut t = Tally::default();
    let grid = AnchorConfig::new(3, 2, 8.0, vec![1.0, 2.0])?;
    let anchors = generate_anchors(&grid);
    let rule: LabelRule = "pos0.4+split_0.4_0.8_0.5_0.9".parse()?;
    for trial in 0..cfg.trials {
        let head = if trial % 2 == 0 { HeadKind::PreciseSigmoid } else { HeadKind::Softmax };
        let cc = head.cls_channels(2);
        let maps = |rng: &mut ChaCha8Rng| -> Result<NetOutput<f64>> {
            Ok(NetOutput {
                cls: Tensor::from_vec([1, cc, 2, 3], uniform(rng, cc * 6, -3.0, 3.0))?,
                reg: Tensor::from_vec([1, 8, 2, 3], uniform(rng, 48, -2.0, 2.0))?,
            })
        };
        let (student, teacher) = (maps(rng)?, maps(rng)?);
        let gts = [BBox::from_center(rng.gen_range(2.0..22.0), rng.gen_range(2.0..14.0), 10.0, 10.0)];
        let a = assign(&anchors, &gts, &rule, true);
        let samples = vec![(0..a.len()).collect::<Vec<_>>()];
        let loss = LossConfig {
            lambda: rng.gen_range(1.0..10.0),
            smooth_l1_delta: 1.0,
        };
        let orig = OrigTerm {
            head,
            num_anchors: 2,
            assignments: &[&a],
            samples: &samples,
            loss: &loss,
        };
        let dcfg = DistillConfig {
            w_distill_cls: rng.gen_range(0.0..2.0),
            w_distill_reg: rng.gen_range(0.0..2.0),
            w_orig: rng.gen_range(0.0..2.0),
            match_post_sigmoid: rng.gen_bool(0.5),
            ..DistillConfig::default()
        };
        let (_, d_cls, d_reg) = distill_loss(&student, &teacher, &orig, &dcfg)?;
        let nc = student.cls.len();
        let mut x = student.cls.data().to_vec();
        x.extend(student.reg.data());
        let mut analytic = d_cls.data().to_vec();
        analytic.extend(d_reg.data());
        let split = |v: &[f64]| NetOutput {
            cls: Tensor::from_vec(student.cls.shape(), v[..nc].to_vec()).expect("same shape"),
            reg: Tensor::from_vec(student.reg.shape(), v[nc..].to_vec()).expect("same shape"),
        };
        let targets: Vec<Option<[f64; 4]>> = (0..a.len())
            .map(|i| a.targets[i].filter(|_| a.labels[i].is_positive()))
            .collect();
        let regime = |v: &[f64]| {
            let reg = &v[nc..];
            let mut r = l1_regime(reg, teacher.reg.data(), 1.0);
            for (i, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    let (k, y, xx) = anchor_slot(i, 2, 3);
                    for (c, tc) in t.iter().enumerate() {
                        r.push((reg[((4 * k + c) * 2 + y) * 3 + xx] - tc).abs() < 1.0);
                    }
                }
            }
            r
        };
        let all: Vec<usize> = (0..x.len()).collect();
        check_coords(
            &x,
            &analytic,
            &all,
            cfg.step,
            &mut t,
            |v| {
                distill_loss(&split(v), &teacher, &orig, &dcfg)
                    .map(|r| r.0.total)
                    .unwrap_or(f64::NAN)
            },
            regime,
        );
        t.trials += 1;
    }
    Ok(t.finish("distill_loss", cfg.tolerance))
}

/// Runs every check and reports the worst relative error of each.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = vec![
        check_softmax(cfg, &mut rng)?,
        check_precise_sigmoid(cfg, &mut rng)?,
        check_smooth_l1(cfg, &mut rng)?,
        check_conv(cfg, &mut rng)?,
    ];
    checks.extend(check_network(cfg, &mut rng)?);
    checks.push(check_distill(cfg, &mut rng)?);
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_cubic() {
        let g = central_difference(&[2.0, -1.0], 1e-5, |v| v[0].powi(3) + 2.0 * v[1]);
        assert!((g[0] - 12.0).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(1.0, 1.0, 1e-4), 0.0);
        assert!((rel_error(2.0, 1.0, 1e-4) - 0.5).abs() < 1e-15);
        assert!((rel_error(1e-9, 0.0, 1e-4) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn small_suite_passes() {
        let cfg = GradcheckConfig {
            trials: 6,
            ..GradcheckConfig::default()
        };
        let report = run_suite(&cfg).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.checks.iter().any(|c| c.name == "layer backbone.0"));
    }

    #[test]
    fn broken_gradient_is_caught() {
        let mut t = Tally::default();
        check_coords(&[1.0, 2.0], &[2.0, 5.0], &[0, 1], 1e-5, &mut t, |v| v[0] * v[0] + v[1] * v[1], no_kinks);
        assert!(t.finish("x", 1e-6).max_rel_error > 0.1);
    }
}
