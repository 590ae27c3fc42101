use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pbs_core::data::{DatasetSource, SceneSpec};
use pbs_core::distill::StudentInit;
use pbs_core::pipeline::{EvalSettings, Pretrain, Recipe};
use pbs_core::{
    AnchorConfig, DistillConfig, HeadKind, InferenceConfig, LabelRule, LossConfig, NetConfig, TrainParams,
};

/// Either a manifest on disk or a run of synthetic seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Manifest(PathBuf),
    Synthetic {
        first_seed: u64,
        count: usize,
        #[serde(default)]
        spec: SceneSpec,
    },
}

impl DataSpec {
    /// Relative manifest paths resolve against `base` (the config's directory).
    pub fn source(&self, base: &Path) -> DatasetSource {
        match self {
            DataSpec::Manifest(p) => DatasetSource::Manifest(base.join(p)),
            DataSpec::Synthetic {
                first_seed,
                count,
                spec,
            } => DatasetSource::Synthetic {
                first_seed: *first_seed,
                count: *count,
                spec: spec.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSpec,
    pub test: DataSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub recipe: Recipe,
    pub distill: DistillConfig,
    pub inference: InferenceConfig,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    /// The desk setup: 64x64 synthetic scenes, a stride-8 net with four
    /// anchors per cell, softmax pretraining then a sigmoid head on split labels.
    fn default() -> Self {
        let binary = LabelRule::binary(0.7, 0.3).expect("valid bounds");
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/desk"),
            data: DataConfig {
                train: DataSpec::Synthetic {
                    first_seed: 0,
                    count: 500,
                    spec: SceneSpec::default(),
                },
                test: DataSpec::Synthetic {
                    first_seed: 1_000_000,
                    count: 100,
                    spec: SceneSpec::default(),
                },
            },
            recipe: Recipe {
                net: NetConfig {
                    total_stride: 8,
                    head: HeadKind::PreciseSigmoid,
                    ..NetConfig::default()
                },
                anchors: AnchorConfig::new(8, 8, 8.0, vec![1.5, 2.0, 3.0, 4.0]).expect("valid anchors"),
                rule: "pos0.4+split_0.4_0.8_0.5_0.9".parse().expect("valid rule"),
                loss: LossConfig::default(),
                train: TrainParams {
                    iterations: 1000,
                    clip_grad_norm: Some(5.0),
                    ..TrainParams::default()
                },
                pretrain: Some(Pretrain {
                    iterations: 1000,
                    rule: binary,
                }),
            },
            distill: DistillConfig {
                student_init: StudentInit::HalfTrained,
                ..DistillConfig::default()
            },
            inference: InferenceConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates; the returned path is the directory relative
    /// manifest paths resolve against.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn validate(&self) -> Result<()> {
        self.recipe.validate()?;
        self.distill.validate()?;
        self.inference.validate()?;
        for (name, d) in [("train", &self.data.train), ("test", &self.data.test)] {
            if let DataSpec::Synthetic { spec, .. } = d {
                spec.validate().with_context(|| format!("data.{name}.spec"))?;
                if spec.channels != self.recipe.net.in_channels {
                    bail!(
                        "data.{name}: {}-channel scenes but the net takes {} channels",
                        spec.channels,
                        self.recipe.net.in_channels
                    );
                }
                let stride = self.recipe.net.total_stride;
                let a = &self.recipe.anchors;
                if spec.width % stride != 0 || spec.height % stride != 0 {
                    bail!("data.{name}: {}x{} scenes are not a multiple of stride {stride}", spec.width, spec.height);
                }
                let (fh, fw) = (spec.height / stride, spec.width / stride);
                if (fw, fh) != (a.feature_w, a.feature_h) {
                    bail!(
                        "data.{name}: {}x{} scenes give a {fw}x{fh} feature map but anchors are {}x{}",
                        spec.width,
                        spec.height,
                        a.feature_w,
                        a.feature_h
                    );
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"seed": 1, "sede": 2}"#).is_err());
        let nested = r#"{"inference": {"top_k": 5, "nms": 0.3}}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(nested).is_err());
    }

    #[test]
    fn shipped_configs_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let (pbs, _) = ExperimentConfig::load(&dir.join("desk_pbs.json")).unwrap();
        assert_eq!(pbs.recipe, ExperimentConfig::default().recipe);
        let (soft, _) = ExperimentConfig::load(&dir.join("desk_softmax.json")).unwrap();
        assert_eq!(soft.recipe.net.head, HeadKind::Softmax);
        assert_eq!(soft.recipe.train.iterations, 2000);
    }

    #[test]
    fn mismatched_anchor_grid() {
        let mut cfg = ExperimentConfig::default();
        cfg.recipe.anchors.feature_w = 4;
        assert!(cfg.validate().is_err());
    }
}
