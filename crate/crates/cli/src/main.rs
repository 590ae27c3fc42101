//! `pbs`: data generation, training, distillation, detection, evaluation,
//! label statistics and gradient checks driven by one JSON config.
//!
//! Exit codes: 0 ok, 1 usage or config error, 2 runtime error, 3 divergence
//! or a failed check.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::ExperimentConfig;
use pbs_core::LabelRule;

#[derive(Parser, Debug)]
#[command(name = "pbs", version, about = "Anchor detector training with precise box-score labels")]
struct Cli {
    /// Experiment config (JSON). Without one the built-in desk setup is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Errors only.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train/test splits as images plus manifests.
    GenData,
    /// Train the configured recipe and evaluate it on the test split.
    Train {
        /// Start from these weights; a softmax checkpoint is switched to the
        /// sigmoid head when the recipe asks for one.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train a narrower student against a frozen teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Run a trained net over images and write detections CSV.
    Detect {
        #[arg(long)]
        weights: PathBuf,
        /// Detect every image of this manifest (before any listed images).
        #[arg(long)]
        manifest: Option<PathBuf>,
        images: Vec<PathBuf>,
    },
    /// Score a detections CSV against a manifest.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Label histogram of every anchor over an annotation file.
    LabelStats {
        annotations: PathBuf,
        #[arg(long, value_enum, default_value_t = AnnotationFormat::Wider)]
        format: AnnotationFormat,
        /// Defaults to the recipe's rule.
        #[arg(long)]
        rule: Option<LabelRule>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long)]
        trials: Option<usize>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AnnotationFormat {
    Wider,
    Fddb,
}

/// A check ran and failed (exit 3).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

/// Bad arguments or config (exit 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<CheckFailed>() || matches!(cause.downcast_ref(), Some(pbs_core::Error::Diverged { .. })) {
            return 3;
        }
        if cause.is::<UsageError>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let loaded = match &cli.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok((ExperimentConfig::default(), PathBuf::new())),
    };
    let (mut cfg, base) = match loaded {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    let ctx = commands::Context {
        cfg,
        base,
        quiet: cli.quiet,
    };
    let result = match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Train { init } => commands::train(&ctx, init.as_deref()),
        Command::Distill { teacher } => commands::distill(&ctx, &teacher),
        Command::Detect {
            weights,
            manifest,
            images,
        } => commands::detect(&ctx, &weights, manifest.as_deref(), &images),
        Command::Eval { dets, manifest } => commands::eval(&ctx, &dets, &manifest),
        Command::LabelStats {
            annotations,
            format,
            rule,
        } => commands::label_stats(&ctx, &annotations, format, rule),
        Command::Gradcheck { trials } => commands::gradcheck(&ctx, trials),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
