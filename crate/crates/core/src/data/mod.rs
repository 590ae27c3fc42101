//! Datasets: deterministic synthetic scenes, annotation parsers and
//! on-disk manifests.

mod annotations;
mod manifest;
mod pnm;
mod synth;

pub use annotations::{
    parse_fddb, parse_wider, write_fddb, write_wider, AnnotationRecord, Ellipse,
};
pub use manifest::{read_manifest, write_dataset, DatasetSource, ManifestEntry};
pub use pnm::{read_pnm, write_pnm};
pub use synth::{gen_scene, SceneSpec};

use crate::geometry::BBox;
use crate::micronet::{Tensor, TrainSample};
use crate::num::Real;

/// 8-bit image, channels interleaved per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            pixels: vec![0; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// `[1, C, H, W]` tensor scaled to roughly `[-2, 2]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut data = vec![T::zero(); w * h * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(ch * h + y) * w + x] = T::of((self.get(x, y, ch) as f64 - 128.0) / 64.0);
                }
            }
        }
        Tensor::from_vec([1, c, h, w], data).expect("sized above")
    }
}

/// An image with its ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: Image,
    pub gts: Vec<BBox>,
}

impl Scene {
    pub fn to_sample<T: Real>(&self) -> TrainSample<T> {
        TrainSample {
            image: self.image.to_tensor(),
            gts: self.gts.clone(),
        }
    }
}

pub fn to_samples<T: Real>(scenes: &[Scene]) -> Vec<TrainSample<T>> {
    scenes.iter().map(Scene::to_sample).collect()
}
