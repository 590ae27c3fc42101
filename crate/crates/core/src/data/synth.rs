//! Synthetic detection scenes.
//!
//! Targets are filled ellipses with two dark interior dots; distractors are
//! plain rectangles and triangles of the same brightness. Everything is
//! rendered with integer arithmetic from a seeded ChaCha stream, so a seed
//! reproduces the same pixels and boxes on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Image, Scene};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub min_targets: usize,
    pub max_targets: usize,
    /// Target height range in pixels (inclusive).
    pub min_size: usize,
    pub max_size: usize,
    pub max_distractors: usize,
    /// Background noise amplitude.
    pub noise: u8,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            channels: 1,
            min_targets: 1,
            max_targets: 3,
            min_size: 12,
            max_size: 30,
            max_distractors: 2,
            noise: 20,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid("scene channels must be 1 or 3"));
        }
        if self.min_targets > self.max_targets {
            return Err(Error::invalid("min_targets > max_targets"));
        }
        if self.min_size < 6 || self.min_size > self.max_size {
            return Err(Error::invalid("need 6 <= min_size <= max_size"));
        }
        if self.max_size + 2 > self.width.min(self.height) {
            return Err(Error::invalid("max_size does not fit the image"));
        }
        if self.noise > 60 {
            return Err(Error::invalid("noise must be <= 60"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Center and semi-axes.
    Ellipse { cx: i64, cy: i64, a: i64, b: i64 },
    Rect { x1: i64, y1: i64, x2: i64, y2: i64 },
    /// Vertices.
    Triangle([(i64, i64); 3]),
}

impl Shape {
    /// Inclusive pixel bounds.
    fn bounds(&self) -> (i64, i64, i64, i64) {
        match *self {
            Shape::Ellipse { cx, cy, a, b } => (cx - a, cy - b, cx + a, cy + b),
            Shape::Rect { x1, y1, x2, y2 } => (x1, y1, x2, y2),
            Shape::Triangle(v) => (
                v.iter().map(|p| p.0).min().unwrap(),
                v.iter().map(|p| p.1).min().unwrap(),
                v.iter().map(|p| p.0).max().unwrap(),
                v.iter().map(|p| p.1).max().unwrap(),
            ),
        }
    }

    fn contains(&self, x: i64, y: i64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, a, b } => ellipse_contains(cx, cy, a, b, x, y),
            Shape::Rect { x1, y1, x2, y2 } => x >= x1 && x <= x2 && y >= y1 && y <= y2,
            Shape::Triangle([p0, p1, p2]) => {
                let edge = |a: (i64, i64), b: (i64, i64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let (d0, d1, d2) = (edge(p0, p1), edge(p1, p2), edge(p2, p0));
                (d0 >= 0 && d1 >= 0 && d2 >= 0) || (d0 <= 0 && d1 <= 0 && d2 <= 0)
            }
        }
    }
}

#[inline]
fn ellipse_contains(cx: i64, cy: i64, a: i64, b: i64, x: i64, y: i64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    dx * dx * b * b + dy * dy * a * a <= a * a * b * b
}

fn overlaps(p: (i64, i64, i64, i64), q: (i64, i64, i64, i64), margin: i64) -> bool {
    p.0 <= q.2 + margin && q.0 <= p.2 + margin && p.1 <= q.3 + margin && q.1 <= p.3 + margin
}

fn clamp_u8(v: i64) -> u8 {
    v.clamp(0, 255) as u8
}

/// Renders one scene; the ground-truth box of a target is the tight
/// continuous-coordinate box around its ellipse pixels.
pub fn gen_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width as i64, spec.height as i64);
    let n_targets = rng.gen_range(spec.min_targets..=spec.max_targets);
    let n_distractors = rng.gen_range(0..=spec.max_distractors);

    let mut placed: Vec<(i64, i64, i64, i64)> = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..n_targets {
        for _attempt in 0..40 {
            let bh = rng.gen_range(spec.min_size as i64..=spec.max_size as i64);
            let b = (bh - 1) / 2;
            // width between 70% and 100% of the height
            let a = (b * rng.gen_range(70..=100) / 100).max(3);
            let cx = rng.gen_range(a + 1..w - a - 1);
            let cy = rng.gen_range(b + 1..h - b - 1);
            let s = Shape::Ellipse { cx, cy, a, b };
            if placed.iter().all(|p| !overlaps(*p, s.bounds(), 1)) {
                placed.push(s.bounds());
                targets.push(s);
                break;
            }
        }
    }
    let mut distractors = Vec::new();
    for _ in 0..n_distractors {
        for _attempt in 0..40 {
            let side = rng.gen_range(spec.min_size as i64..=spec.max_size as i64);
            let aspect = rng.gen_range(60..=140);
            let (sw, sh) = (side.min(w - 2), (side * aspect / 100).clamp(4, h - 2));
            let x1 = rng.gen_range(0..w - sw);
            let y1 = rng.gen_range(0..h - sh);
            let s = if rng.gen_bool(0.5) {
                Shape::Rect {
                    x1,
                    y1,
                    x2: x1 + sw - 1,
                    y2: y1 + sh - 1,
                }
            } else {
                let apex = x1 + rng.gen_range(0..sw);
                Shape::Triangle([(apex, y1), (x1, y1 + sh - 1), (x1 + sw - 1, y1 + sh - 1)])
            };
            if placed.iter().all(|p| !overlaps(*p, s.bounds(), 1)) {
                placed.push(s.bounds());
                distractors.push(s);
                break;
            }
        }
    }

    let base = rng.gen_range(70..=110i64);
    let fill = rng.gen_range(170..=215i64);
    let noise = spec.noise as i64;
    let mut img = Image::new(spec.width, spec.height, spec.channels);
    let tint: Vec<i64> = (0..spec.channels).map(|_| rng.gen_range(-10..=10)).collect();
    for y in 0..h {
        for x in 0..w {
            let n = if noise > 0 { rng.gen_range(-noise..=noise) } else { 0 };
            let mut v = base + n;
            if distractors.iter().chain(&targets).any(|s| s.contains(x, y)) {
                v = fill + n / 2;
            }
            for (c, t) in tint.iter().enumerate() {
                img.set(x as usize, y as usize, c, clamp_u8(v + t));
            }
        }
    }
    // two dark dots in the upper half of each target
    for s in &targets {
        let Shape::Ellipse { cx, cy, a, b } = *s else { unreachable!() };
        let r = (a / 4).max(1);
        for (dx, dy) in [(-a / 2, -b / 3), (a / 2, -b / 3)] {
            let (ex, ey) = (cx + dx, cy + dy);
            for y in ey - r..=ey + r {
                for x in ex - r..=ex + r {
                    if (x - ex) * (x - ex) + (y - ey) * (y - ey) <= r * r && ellipse_contains(cx, cy, a, b, x, y) {
                        for c in 0..spec.channels {
                            img.set(x as usize, y as usize, c, clamp_u8(35 + tint[c]));
                        }
                    }
                }
            }
        }
    }

    let gts = targets
        .iter()
        .map(|s| {
            let (x1, y1, x2, y2) = s.bounds();
            BBox {
                x1: x1 as f64,
                y1: y1 as f64,
                x2: (x2 + 1) as f64,
                y2: (y2 + 1) as f64,
            }
        })
        .collect();
    Ok(Scene {
        id: format!("scene_{seed:06}"),
        image: img,
        gts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SceneSpec::default();
        for seed in [0, 1, 99] {
            assert_eq!(gen_scene(seed, &spec).unwrap(), gen_scene(seed, &spec).unwrap());
        }
        assert_ne!(gen_scene(1, &spec).unwrap().image, gen_scene(2, &spec).unwrap().image);
    }

    #[test]
    fn no_targets() {
        let spec = SceneSpec {
            min_targets: 0,
            max_targets: 0,
            ..SceneSpec::default()
        };
        assert!(gen_scene(5, &spec).unwrap().gts.is_empty());
    }

    #[test]
    fn boxes_inside_image() {
        let spec = SceneSpec::default();
        for seed in 0..200 {
            let s = gen_scene(seed, &spec).unwrap();
            assert!(!s.gts.is_empty());
            for g in &s.gts {
                assert!(g.x1 >= 0.0 && g.y1 >= 0.0 && g.x2 <= 64.0 && g.y2 <= 64.0, "{g:?}");
                assert!(g.height() >= spec.min_size as f64 - 1.0 && g.height() <= spec.max_size as f64);
            }
        }
    }

    #[test]
    fn gt_box_is_tight_around_ellipse_pixels() {
        // pixel-scan oracle: recompute each ellipse's pixel extent from the mask
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (a, b) = (rng.gen_range(3..15i64), rng.gen_range(3..15i64));
            let (cx, cy) = (rng.gen_range(20..40i64), rng.gen_range(20..40i64));
            let s = Shape::Ellipse { cx, cy, a, b };
            let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
            for y in 0..64 {
                for x in 0..64 {
                    if s.contains(x, y) {
                        lo_x = lo_x.min(x);
                        hi_x = hi_x.max(x);
                        lo_y = lo_y.min(y);
                        hi_y = hi_y.max(y);
                    }
                }
            }
            assert_eq!(s.bounds(), (lo_x, lo_y, hi_x, hi_y));
        }
    }

    #[test]
    fn rgb_scenes() {
        let spec = SceneSpec {
            channels: 3,
            ..SceneSpec::default()
        };
        let s = gen_scene(4, &spec).unwrap();
        assert_eq!(s.image.pixels.len(), 64 * 64 * 3);
        assert_eq!(s.image.to_tensor::<f32>().shape(), [1, 3, 64, 64]);
    }
}
