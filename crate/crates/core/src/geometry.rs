//! Axis-aligned boxes, IoU and the square anchor grid.
//!
//! Boxes use the continuous-coordinate convention: a box `[x1, y1, x2, y2]`
//! covers `x1 <= x < x2`, so its area is `(x2 - x1) * (y2 - y1)` with no
//! `+1` pixel correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting inverted or non-finite corners.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::invalid(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    #[inline]
    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() <= 0.0 || self.height() <= 0.0
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        BBox {
            x1: self.x1 * k,
            y1: self.y1 * k,
            x2: self.x2 * k,
            y2: self.y2 * k,
        }
    }

    /// Clips to `[0, w] x [0, h]`.
    pub fn clip(&self, w: f64, h: f64) -> Self {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[inline]
pub fn area(b: &BBox) -> f64 {
    (b.x2 - b.x1).max(0.0) * (b.y2 - b.y1).max(0.0)
}

/// Intersection over union; zero when the union is empty.
#[inline]
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Dense IoU table, row-major with `anchors.len()` rows and `gts.len()` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct IouMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl IouMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}

pub fn iou_matrix(anchors: &[BBox], gts: &[BBox]) -> IouMatrix {
    let mut data = Vec::with_capacity(anchors.len() * gts.len());
    for a in anchors {
        data.extend(gts.iter().map(|g| iou(a, g)));
    }
    IouMatrix {
        rows: anchors.len(),
        cols: gts.len(),
        data,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    pub feature_w: usize,
    pub feature_h: usize,
    pub stride: f64,
    pub scales: Vec<f64>,
    /// Clip anchors to the image (`feature * stride`) before labeling.
    #[serde(default)]
    pub clip_to_image: bool,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            feature_w: 4,
            feature_h: 4,
            stride: 16.0,
            scales: vec![4.0, 8.0, 16.0, 32.0],
            clip_to_image: false,
        }
    }
}

impl AnchorConfig {
    pub fn new(feature_w: usize, feature_h: usize, stride: f64, scales: Vec<f64>) -> Result<Self> {
        let cfg = AnchorConfig {
            feature_w,
            feature_h,
            stride,
            scales,
            clip_to_image: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stride > 0.0 && self.stride.is_finite()) {
            return Err(Error::invalid(format!("anchor stride must be > 0, got {}", self.stride)));
        }
        if self.scales.is_empty() {
            return Err(Error::invalid("anchor scales must be non-empty"));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("anchor scale must be > 0, got {s}")));
        }
        Ok(())
    }

    /// Anchors per feature-map cell.
    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn num_anchors(&self) -> usize {
        self.feature_w * self.feature_h * self.scales.len()
    }

    pub fn image_size(&self) -> (f64, f64) {
        (
            self.feature_w as f64 * self.stride,
            self.feature_h as f64 * self.stride,
        )
    }

    /// Same grid, resized to a different feature map.
    pub fn with_feature_size(&self, feature_w: usize, feature_h: usize) -> Self {
        AnchorConfig {
            feature_w,
            feature_h,
            ..self.clone()
        }
    }
}

/// Square anchors, row-major over cells (`i` = row, `j` = column), then
/// scales within a cell: anchor `(i * feature_w + j) * K + k`.
pub fn generate_anchors(cfg: &AnchorConfig) -> Vec<BBox> {
    let mut out = Vec::with_capacity(cfg.num_anchors());
    let (img_w, img_h) = cfg.image_size();
    for i in 0..cfg.feature_h {
        let cy = (i as f64 + 0.5) * cfg.stride;
        for j in 0..cfg.feature_w {
            let cx = (j as f64 + 0.5) * cfg.stride;
            for &s in &cfg.scales {
                let side = s * cfg.stride;
                let b = BBox::from_center(cx, cy, side, side);
                out.push(if cfg.clip_to_image { b.clip(img_w, img_h) } else { b });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn area_examples() {
        assert_eq!(area(&b(0., 0., 10., 10.)), 100.0);
        assert_eq!(area(&b(5., 5., 5., 9.)), 0.0);
        assert_eq!(area(&b(0., 0., 3., 7.)), 21.0);
    }

    #[test]
    fn invalid_box_rejected() {
        assert!(BBox::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b(0., 0., 10., 10.);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20., 20., 30., 30.)), 0.0);
        // touching edges share no area
        assert_eq!(iou(&a, &b(10., 0., 20., 10.)), 0.0);
        assert_abs_diff_eq!(iou(&a, &b(5., 5., 15., 15.)), 25.0 / 175.0, epsilon = 1e-12);
        let p = b(3., 3., 3., 3.);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn iou_matrix_matches_elementwise() {
        let anchors = [b(0., 0., 4., 4.), b(1., 2., 9., 5.), b(3., 3., 12., 14.)];
        let gts = [b(2., 2., 6., 6.), b(0., 0., 10., 10.)];
        let m = iou_matrix(&anchors, &gts);
        assert_eq!((m.rows(), m.cols()), (3, 2));
        for (i, a) in anchors.iter().enumerate() {
            for (j, g) in gts.iter().enumerate() {
                assert_eq!(m.get(i, j), iou(a, g));
            }
        }
        assert!(iou_matrix(&[], &gts).is_empty());
        assert!(iou_matrix(&anchors, &[]).is_empty());
        let one = iou_matrix(&gts[..1], &gts[..1]);
        assert_eq!(one.row(0), &[1.0]);
    }

    #[test]
    fn anchor_grid_examples() {
        let cfg = AnchorConfig::new(2, 3, 16.0, vec![4., 8., 16., 32.]).unwrap();
        assert_eq!(generate_anchors(&cfg).len(), 24);

        let one = generate_anchors(&AnchorConfig::new(1, 1, 16.0, vec![4.0]).unwrap());
        assert_eq!(one, vec![b(-24., -24., 40., 40.)]);
        assert_eq!(one[0].center(), (8.0, 8.0));
        assert_eq!(one[0].width(), 64.0);

        for s in [1.0, 3.0, 7.5, 16.0] {
            let a = generate_anchors(&AnchorConfig::new(1, 1, s, vec![2.0]).unwrap());
            assert_eq!(a[0].width(), 2.0 * s);
            assert_eq!(a[0].height(), 2.0 * s);
        }
    }

    #[test]
    fn anchor_order_is_row_major_then_scale() {
        let cfg = AnchorConfig::new(3, 2, 10.0, vec![1.0, 2.0]).unwrap();
        let a = generate_anchors(&cfg);
        // row 1, column 2, scale 1
        let idx = (3 + 2) * 2 + 1;
        assert_eq!(a[idx].center(), (25.0, 15.0));
        assert_eq!(a[idx].width(), 20.0);
    }

    #[test]
    fn anchor_clipping_flag() {
        let mut cfg = AnchorConfig::new(1, 1, 16.0, vec![4.0]).unwrap();
        cfg.clip_to_image = true;
        assert_eq!(generate_anchors(&cfg), vec![b(0., 0., 16., 16.)]);
    }

    #[test]
    fn anchor_config_validation() {
        assert!(AnchorConfig::new(1, 1, 0.0, vec![1.0]).is_err());
        assert!(AnchorConfig::new(1, 1, 8.0, vec![]).is_err());
        assert!(AnchorConfig::new(1, 1, 8.0, vec![1.0, -2.0]).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.0..40.0f64, 0.0..40.0f64)
            .prop_map(|(x, y, w, h)| BBox { x1: x, y1: y, x2: x + w, y2: y + h })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assume!(!a.is_degenerate());
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_translation_and_scale_invariant(
            a in arb_box(), c in arb_box(),
            dx in -100.0..100.0f64, dy in -100.0..100.0f64, k in 0.1..10.0f64,
        ) {
            let base = iou(&a, &c);
            prop_assert!((iou(&a.translate(dx, dy), &c.translate(dx, dy)) - base).abs() < 1e-9);
            prop_assert!((iou(&a.scale(k), &c.scale(k)) - base).abs() < 1e-9);
        }

        #[test]
        fn anchor_count_exact(w in 0usize..12, h in 0usize..12, k in 1usize..6, stride in 1.0..32.0f64) {
            let scales = (1..=k).map(|s| s as f64).collect();
            let cfg = AnchorConfig::new(w, h, stride, scales).unwrap();
            prop_assert_eq!(generate_anchors(&cfg).len(), w * h * k);
        }
    }
}
