use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{assign, AnchorLabel, LabelRule};
use crate::geometry::{generate_anchors, AnchorConfig, BBox};

/// Label counts over a dataset. Positive buckets are keyed by target value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelHistogram {
    pub negative: usize,
    pub ignore: usize,
    // f64 bit patterns of non-negative targets order like the values
    positive: BTreeMap<u64, usize>,
}

impl LabelHistogram {
    pub fn add(&mut self, label: AnchorLabel) {
        match label {
            AnchorLabel::Negative => self.negative += 1,
            AnchorLabel::Ignore => self.ignore += 1,
            AnchorLabel::Positive(t) => *self.positive.entry(t.to_bits()).or_default() += 1,
        }
    }

    /// `(target, count)` in increasing target order.
    pub fn positive(&self) -> Vec<(f64, usize)> {
        self.positive.iter().map(|(k, v)| (f64::from_bits(*k), *v)).collect()
    }

    pub fn positive_count(&self, target: f64) -> usize {
        self.positive.get(&target.to_bits()).copied().unwrap_or(0)
    }

    pub fn total_positive(&self) -> usize {
        self.positive.values().sum()
    }

    pub fn total(&self) -> usize {
        self.negative + self.ignore + self.total_positive()
    }

    pub fn ignore_fraction(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.ignore as f64 / t as f64,
        }
    }

    /// CSV with columns `bucket,count,fraction`; positive buckets are
    /// named `positive:<target>`.
    pub fn to_csv(&self) -> String {
        let total = self.total();
        let frac = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
        let mut out = String::from("bucket,count,fraction\n");
        let _ = writeln!(out, "negative,{},{}", self.negative, frac(self.negative));
        let _ = writeln!(out, "ignore,{},{}", self.ignore, frac(self.ignore));
        for (t, c) in self.positive() {
            let _ = writeln!(out, "positive:{t},{c},{}", frac(c));
        }
        out
    }
}

/// Labels every anchor of every image with one shared anchor grid.
pub fn label_stats(
    images: &[Vec<BBox>],
    cfg: &AnchorConfig,
    rule: &LabelRule,
    force_best_match: bool,
) -> LabelHistogram {
    let anchors = generate_anchors(cfg);
    let mut hist = LabelHistogram::default();
    for gts in images {
        for l in assign(&anchors, gts, rule, force_best_match).labels {
            hist.add(l);
        }
    }
    hist
}
