use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _, Result};
use log::{error, info, warn};
use serde::{Deserialize, Serialize};

use pbs_core::assignment::label_stats as histogram;
use pbs_core::data::{parse_fddb, parse_wider, read_manifest, read_pnm, to_samples, write_dataset, Scene};
use pbs_core::distill::{distill_trace_csv, StudentInit};
use pbs_core::eval::EvalSummary;
use pbs_core::inference::detections_csv;
use pbs_core::micronet::{load_weights, save_weights, trace_csv, TraceRow};
use pbs_core::pipeline::{evaluate_net, train_recipe, Recipe};
use pbs_core::{
    detect as run_detect, distill_train, evaluate, gradcheck, shrink_model, AnchorConfig, BBox, Detection,
    DetectorNet, HeadKind, LabelRule,
};

use crate::config::{DataSpec, ExperimentConfig};
use crate::{AnnotationFormat, CheckFailed, UsageError};

pub struct Context {
    pub cfg: ExperimentConfig,
    /// Directory relative data paths in the config resolve against.
    pub base: PathBuf,
    pub quiet: bool,
}

impl Context {
    /// Creates the output directory and echoes the effective config into it.
    fn out_dir(&self) -> Result<&Path> {
        let out = self.cfg.out.as_path();
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_json(&out.join("config.json"), &self.cfg)?;
        Ok(out)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn scenes(&self, spec: &DataSpec) -> Result<Vec<Scene>> {
        Ok(spec.source(&self.base).scenes()?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(ctx: &Context) -> Result<()> {
    let out = ctx.out_dir()?;
    for (name, spec) in [("train", &ctx.cfg.data.train), ("test", &ctx.cfg.data.test)] {
        if let DataSpec::Manifest(p) = spec {
            info!("{name} split already on disk at {}", p.display());
            continue;
        }
        let scenes = ctx.scenes(spec)?;
        let manifest = write_dataset(out.join(name), &scenes)?;
        ctx.say(format!("{name}: {} scenes -> {}", scenes.len(), manifest.display()));
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    head: HeadKind,
    rule: &'a LabelRule,
    seed: u64,
    pretrain_iterations: usize,
    iterations: usize,
    final_loss: Option<f64>,
    checksum: String,
    test: EvalSummary,
}

pub fn train(ctx: &Context, init: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let recipe = &cfg.recipe;
    let train_scenes = ctx.scenes(&cfg.data.train)?;
    let test_scenes = ctx.scenes(&cfg.data.test)?;
    let data = to_samples::<f32>(&train_scenes);
    let init = match init {
        None => None,
        Some(path) => {
            let net: DetectorNet<f32> = load_weights(path)?;
            let net = match (net.head(), recipe.net.head) {
                (a, b) if a == b => net,
                (HeadKind::Softmax, HeadKind::PreciseSigmoid) => {
                    info!("switching softmax checkpoint {} to a sigmoid head", path.display());
                    net.switch_head_softmax_to_sigmoid()?
                }
                (a, b) => return Err(UsageError(format!("checkpoint head {a:?} cannot start a {b:?} recipe")).into()),
            };
            if net.config().num_anchors != recipe.net.num_anchors {
                return Err(UsageError("checkpoint anchors per cell differ from the recipe".into()).into());
            }
            Some(net)
        }
    };
    if init.is_some() && recipe.pretrain.is_some() {
        info!("starting from a checkpoint; pretrain phase skipped");
    }
    let out = ctx.out_dir()?;
    let trained = train_recipe(recipe, &data, cfg.seed, init)?;
    save_weights(&trained.net, out.join("model.bin"))?;
    write_text(&out.join("trace.csv"), &trace_csv(&trained.trace))?;
    if !trained.pretrain_trace.is_empty() {
        write_text(&out.join("pretrain_trace.csv"), &trace_csv(&trained.pretrain_trace))?;
    }
    let res = evaluate_net(&trained.net, &test_scenes, &recipe.anchors, &cfg.inference, &cfg.eval)?;
    write_text(&out.join("curve.csv"), &res.curve_csv())?;
    let report = TrainReport {
        head: trained.net.head(),
        rule: &recipe.rule,
        seed: cfg.seed,
        pretrain_iterations: trained.pretrain_trace.len(),
        iterations: trained.trace.len(),
        final_loss: trained.trace.last().map(|r: &TraceRow| r.total),
        checksum: trained.net.checksum(),
        test: res.summary(),
    };
    write_json(&out.join("eval.json"), &report)?;
    ctx.say(format!(
        "{:?} / {}: test AP {:.4} over {} images -> {}",
        report.head,
        recipe.rule,
        report.test.ap,
        report.test.num_images,
        out.display()
    ));
    Ok(())
}

#[derive(Serialize)]
struct StudentRow {
    name: &'static str,
    width: f64,
    params: usize,
    #[serde(flatten)]
    test: EvalSummary,
}

#[derive(Serialize)]
struct DistillReport {
    factor: f64,
    student_init: StudentInit,
    teacher_checksum_before: String,
    teacher_checksum_after: String,
    teacher: EvalSummary,
    students: Vec<StudentRow>,
}

/// `recipe` with both training phases at half length.
fn halved(recipe: &Recipe) -> Recipe {
    let mut r = recipe.clone();
    r.train.iterations /= 2;
    if let Some(p) = r.pretrain.as_mut() {
        p.iterations /= 2;
    }
    r
}

pub fn distill(ctx: &Context, teacher_path: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let dcfg = &cfg.distill;
    let teacher: DetectorNet<f32> = load_weights(teacher_path)?;
    let t = teacher.config();
    if t.head != cfg.recipe.net.head || t.num_anchors != cfg.recipe.net.num_anchors {
        return Err(UsageError(format!(
            "teacher has a {:?} head with {} anchors per cell; the recipe wants {:?} with {}",
            t.head, t.num_anchors, cfg.recipe.net.head, cfg.recipe.net.num_anchors
        ))
        .into());
    }
    let train_scenes = ctx.scenes(&cfg.data.train)?;
    let test_scenes = ctx.scenes(&cfg.data.test)?;
    let data = to_samples::<f32>(&train_scenes);
    let out = ctx.out_dir()?;

    let mut student_recipe = cfg.recipe.clone();
    student_recipe.net = t.clone();
    student_recipe.net.width = t.width * dcfg.factor;
    let student_seed = cfg.seed.wrapping_add(100);

    info!("training standalone student (width {})", student_recipe.net.width);
    let standalone = train_recipe(&student_recipe, &data, student_seed, None)?.net;
    let mut student = match dcfg.student_init {
        StudentInit::Fresh => shrink_model(&teacher, dcfg.factor, student_seed)?,
        StudentInit::HalfTrained => {
            info!("half-training the student before distillation");
            train_recipe(&halved(&student_recipe), &data, student_seed, None)?.net
        }
    };
    let before = teacher.checksum();
    let train_cfg = student_recipe.train_config(t.head, &cfg.recipe.rule, 0, cfg.seed.wrapping_add(200));
    let trace = distill_train(&teacher, &mut student, &data, &train_cfg, dcfg)?;
    let after = teacher.checksum();
    info!("teacher checksum before {before}, after {after}");
    if before != after {
        return Err(CheckFailed("teacher weights changed during distillation".into()).into());
    }
    save_weights(&student, out.join("student.bin"))?;
    save_weights(&standalone, out.join("standalone.bin"))?;
    write_text(&out.join("distill_trace.csv"), &distill_trace_csv(&trace))?;

    let score = |net: &DetectorNet<f32>| -> Result<EvalSummary> {
        Ok(evaluate_net(net, &test_scenes, &cfg.recipe.anchors, &cfg.inference, &cfg.eval)?.summary())
    };
    let report = DistillReport {
        factor: dcfg.factor,
        student_init: dcfg.student_init,
        teacher_checksum_before: before,
        teacher_checksum_after: after,
        teacher: score(&teacher)?,
        students: vec![
            StudentRow {
                name: "standalone",
                width: standalone.config().width,
                params: standalone.num_params(),
                test: score(&standalone)?,
            },
            StudentRow {
                name: "distilled",
                width: student.config().width,
                params: student.num_params(),
                test: score(&student)?,
            },
        ],
    };
    write_json(&out.join("distill.json"), &report)?;
    ctx.say(format!("teacher      AP {:.4}", report.teacher.ap));
    for row in &report.students {
        ctx.say(format!("{:<12} AP {:.4}  ({} params)", row.name, row.test.ap, row.params));
    }
    Ok(())
}

fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn detect_one(net: &DetectorNet<f32>, anchors: &AnchorConfig, ctx: &Context, path: &Path) -> Result<Vec<Detection>> {
    let image = read_pnm(path)?;
    let (fh, fw) = net.output_dims(image.height, image.width)?;
    let grid = AnchorConfig {
        feature_w: fw,
        feature_h: fh,
        ..anchors.clone()
    };
    let mut dets = run_detect(net, &image.to_tensor(), &grid, &ctx.cfg.inference)?;
    Ok(dets.pop().unwrap_or_default())
}

pub fn detect(ctx: &Context, weights: &Path, manifest: Option<&Path>, images: &[PathBuf]) -> Result<()> {
    let net: DetectorNet<f32> = load_weights(weights)?;
    let mut paths = Vec::new();
    if let Some(m) = manifest {
        let base = m.parent().unwrap_or(Path::new(""));
        paths.extend(read_manifest(m)?.iter().map(|e| base.join(&e.image)));
    }
    paths.extend(images.iter().cloned());
    let out = ctx.out_dir()?;
    let mut rows = Vec::with_capacity(paths.len());
    let mut failed = 0;
    for p in &paths {
        match detect_one(&net, &ctx.cfg.recipe.anchors, ctx, p) {
            Ok(d) => rows.push((image_id(p), d)),
            Err(e) => {
                error!("{}: {e:#}", p.display());
                failed += 1;
            }
        }
    }
    let csv = detections_csv(rows.iter().map(|(id, d)| (id.as_str(), d.as_slice())));
    let dest = out.join("detections.csv");
    write_text(&dest, &csv)?;
    let n: usize = rows.iter().map(|r| r.1.len()).sum();
    ctx.say(format!("{n} detections on {} images -> {}", rows.len(), dest.display()));
    if failed > 0 {
        return Err(anyhow!("{failed} of {} images failed", paths.len()));
    }
    Ok(())
}

#[derive(Deserialize)]
struct CsvRow {
    image_id: String,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
}

#[derive(Serialize)]
struct EvalReport {
    iou_min: f64,
    fp_budgets: Vec<usize>,
    scaled_budgets: Vec<usize>,
    #[serde(flatten)]
    summary: EvalSummary,
}

pub fn eval(ctx: &Context, dets_path: &Path, manifest: &Path) -> Result<()> {
    let entries = read_manifest(manifest)?;
    let index: HashMap<String, usize> = entries.iter().enumerate().map(|(i, e)| (e.id(), i)).collect();
    let gts = entries.iter().map(|e| e.gts()).collect::<pbs_core::Result<Vec<Vec<BBox>>>>()?;
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); entries.len()];
    let mut reader = csv::Reader::from_path(dets_path).with_context(|| format!("reading {}", dets_path.display()))?;
    for (n, row) in reader.deserialize::<CsvRow>().enumerate() {
        let row = row.with_context(|| format!("{}: row {}", dets_path.display(), n + 1))?;
        let &i = index.get(&row.image_id).ok_or_else(|| {
            anyhow!("{}: image `{}` is not in {}", dets_path.display(), row.image_id, manifest.display())
        })?;
        dets[i].push(Detection {
            bbox: BBox::new(row.x1, row.y1, row.x2, row.y2)?,
            score: row.score,
            anchor: n,
        });
    }
    let settings = &ctx.cfg.eval;
    let total: usize = gts.iter().map(Vec::len).sum();
    let budgets = settings.budgets_for(total);
    let res = evaluate(&dets, &gts, settings.iou_min, &budgets)?;
    let out = ctx.out_dir()?;
    write_text(&out.join("curve.csv"), &res.curve_csv())?;
    let report = EvalReport {
        iou_min: settings.iou_min,
        fp_budgets: settings.fp_budgets.clone(),
        scaled_budgets: budgets,
        summary: res.summary(),
    };
    write_json(&out.join("metrics.json"), &report)?;
    ctx.say(format!("AP {:.4}, TPR at FP {:?}", report.summary.ap, report.summary.tpr_at_fp));
    Ok(())
}

#[derive(Serialize)]
struct LabelStatsReport<'a> {
    rule: &'a LabelRule,
    images: usize,
    anchors_per_image: usize,
    total: usize,
    positive: usize,
    ignore_fraction: f64,
}

pub fn label_stats(ctx: &Context, path: &Path, format: AnnotationFormat, rule: Option<LabelRule>) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let name = path.display().to_string();
    let records = match format {
        AnnotationFormat::Wider => parse_wider(&text, &name)?,
        AnnotationFormat::Fddb => parse_fddb(&text, &name)?,
    };
    let rule = rule.unwrap_or_else(|| ctx.cfg.recipe.rule);
    let anchors = &ctx.cfg.recipe.anchors;
    let images: Vec<Vec<BBox>> = records.into_iter().map(|r| r.boxes).collect();
    let hist = histogram(&images, anchors, &rule, ctx.cfg.recipe.train.force_best_match);
    let out = ctx.out_dir()?;
    write_text(&out.join("label_stats.csv"), &hist.to_csv())?;
    let report = LabelStatsReport {
        rule: &rule,
        images: images.len(),
        anchors_per_image: anchors.num_anchors(),
        total: hist.total(),
        positive: hist.total_positive(),
        ignore_fraction: hist.ignore_fraction(),
    };
    write_json(&out.join("label_stats.json"), &report)?;
    if images.is_empty() {
        warn!("{} has no images", path.display());
    }
    ctx.say(format!(
        "{rule}: {} anchors over {} images, {} positive, {:.2}% ignored",
        report.total,
        report.images,
        report.positive,
        100.0 * report.ignore_fraction
    ));
    Ok(())
}

pub fn gradcheck(ctx: &Context, trials: Option<usize>) -> Result<()> {
    let mut gc = gradcheck::GradcheckConfig {
        seed: ctx.cfg.seed,
        ..Default::default()
    };
    if let Some(t) = trials {
        gc.trials = t;
    }
    let report = gradcheck::run_suite(&gc)?;
    if !ctx.quiet {
        print!("{report}");
    }
    if report.passed() {
        Ok(())
    } else {
        let bad: Vec<String> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} (max rel err {:.3e})", c.name, c.max_rel_error))
            .collect();
        Err(CheckFailed(format!("gradient check failed: {}", bad.join(", "))).into())
    }
}
