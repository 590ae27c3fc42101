use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pnm::{read_pnm, write_pnm};
use super::synth::{gen_scene, SceneSpec};
use super::Scene;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// One manifest entry; `image` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub boxes: Vec<[f64; 4]>,
}

impl ManifestEntry {
    /// Scene id: the image file stem.
    pub fn id(&self) -> String {
        Path::new(&self.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image.clone())
    }

    pub fn gts(&self) -> Result<Vec<BBox>> {
        self.boxes
            .iter()
            .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
            .collect()
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `<dir>/<id>.pgm|ppm` per scene plus `<dir>/manifest.json`, returning
/// the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, scenes: &[Scene]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for s in scenes {
        let ext = if s.image.channels == 3 { "ppm" } else { "pgm" };
        let name = format!("{}.{ext}", s.id);
        write_pnm(&s.image, dir.join(&name))?;
        entries.push(ManifestEntry {
            image: name,
            boxes: s.gts.iter().map(|g| g.to_array()).collect(),
        });
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Where scenes come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Manifest(PathBuf),
    Synthetic { first_seed: u64, count: usize, spec: SceneSpec },
}

impl DatasetSource {
    /// All scenes, in manifest order or increasing seed order.
    pub fn scenes(&self) -> Result<Vec<Scene>> {
        match self {
            DatasetSource::Manifest(path) => {
                let base = path.parent().unwrap_or(Path::new("."));
                read_manifest(path)?
                    .into_iter()
                    .map(|e| {
                        Ok(Scene {
                            id: e.id(),
                            gts: e.gts()?,
                            image: read_pnm(base.join(&e.image))?,
                        })
                    })
                    .collect()
            }
            DatasetSource::Synthetic {
                first_seed,
                count,
                spec,
            } => (0..*count as u64)
                .map(|i| gen_scene(first_seed + i, spec))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_source_counts_and_order() {
        let src = DatasetSource::Synthetic {
            first_seed: 10,
            count: 4,
            spec: SceneSpec::default(),
        };
        let a = src.scenes().unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a[0].id, "scene_000010");
        assert_eq!(a, src.scenes().unwrap());
        let empty = DatasetSource::Synthetic {
            first_seed: 0,
            count: 0,
            spec: SceneSpec::default(),
        };
        assert!(empty.scenes().unwrap().is_empty());
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = DatasetSource::Synthetic {
            first_seed: 0,
            count: 3,
            spec: SceneSpec::default(),
        }
        .scenes()
        .unwrap();
        let manifest = write_dataset(dir.path(), &scenes).unwrap();
        let back = DatasetSource::Manifest(manifest).scenes().unwrap();
        assert_eq!(back, scenes);
    }

    #[test]
    fn missing_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, r#"[{"image": "nope.pgm", "boxes": []}]"#).unwrap();
        let err = DatasetSource::Manifest(path).scenes().unwrap_err();
        assert!(err.to_string().contains("nope.pgm"));
        let err = DatasetSource::Manifest(dir.path().join("missing.json")).scenes().unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
