//! Greedy IoU matching, discrete ROC operating points and average precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::inference::{rank_order, Detection};

pub const DEFAULT_IOU_MIN: f64 = 0.5;
pub const DEFAULT_FP_BUDGETS: [usize; 3] = [100, 500, 1000];
/// Face count of the benchmark the standard FP budgets refer to.
pub const REFERENCE_GT_COUNT: usize = 5171;

/// Matched gt index for each detection of one image.
///
/// Detections are visited in rank order; each takes the still-unmatched gt of
/// highest IoU (lowest index on ties) when that IoU is at least `iou_min`.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_min: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| rank_order(&dets[a], &dets[b]));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[d].bbox, gt);
            if v >= iou_min && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[d] = Some(g);
        }
    }
    out
}

/// One point of the threshold sweep: everything scoring at least `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub cum_fp: usize,
    pub cum_tp: usize,
    pub tpr: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Pooled `(score, is_true_positive)` pairs.
pub fn pooled(dets: &[Vec<Detection>], matches: &[Vec<Option<usize>>]) -> Vec<(f64, bool)> {
    dets.iter()
        .zip(matches)
        .flat_map(|(d, m)| d.iter().zip(m).map(|(d, m)| (d.score, m.is_some())))
        .collect()
}

/// Sweep from the highest score down, one point per distinct score.
pub fn sweep(scored: &[(f64, bool)], total_gts: usize) -> Vec<CurvePoint> {
    let mut v = scored.to_vec();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out: Vec<CurvePoint> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (i, &(s, hit)) in v.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        if v.get(i + 1).is_none_or(|n| n.0 != s) {
            let recall = if total_gts == 0 { 0.0 } else { tp as f64 / total_gts as f64 };
            out.push(CurvePoint {
                threshold: s,
                cum_fp: fp,
                cum_tp: tp,
                tpr: recall,
                precision: tp as f64 / (tp + fp) as f64,
                recall,
            });
        }
    }
    out
}

/// TPR at the lowest threshold whose cumulative false positives stay within
/// `budget`; 0 if even the top-scoring group exceeds it.
pub fn tpr_at_fp(curve: &[CurvePoint], budget: usize) -> f64 {
    curve
        .iter()
        .take_while(|p| p.cum_fp <= budget)
        .last()
        .map_or(0.0, |p| p.tpr)
}

/// All-point interpolated area under the precision/recall curve.
pub fn average_precision(curve: &[CurvePoint], total_gts: usize) -> Result<f64> {
    if total_gts == 0 {
        return Err(Error::invalid("average precision is undefined without ground truth"));
    }
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, &e) in curve.iter().zip(&envelope) {
        ap += (p.recall - prev) * e;
        prev = p.recall;
    }
    Ok(ap.clamp(0.0, 1.0))
}

/// FP budget rescaled from the reference benchmark to a set with `total_gts`
/// faces, rounded up.
pub fn scaled_budget(budget: usize, total_gts: usize) -> usize {
    (budget * total_gts).div_ceil(REFERENCE_GT_COUNT)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub matches: Vec<Vec<Option<usize>>>,
    /// Fraction of each image's gts that were found; `None` without gts.
    pub image_recall: Vec<Option<f64>>,
    pub curve: Vec<CurvePoint>,
    pub ap: f64,
    /// `(budget, tpr)` pairs in the order requested.
    pub tpr_at: Vec<(usize, f64)>,
    pub total_gts: usize,
    pub total_dets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ap: f64,
    pub tpr_at_fp: BTreeMap<String, f64>,
    pub num_images: usize,
    pub num_gts: usize,
    pub num_dets: usize,
}

/// Match every image, pool and sweep. `budgets` are absolute FP counts.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<BBox>], iou_min: f64, budgets: &[usize]) -> Result<EvalResult> {
    if dets.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let matches: Vec<_> = dets
        .iter()
        .zip(gts)
        .map(|(d, g)| match_detections(d, g, iou_min))
        .collect();
    let total_gts = gts.iter().map(Vec::len).sum();
    let curve = sweep(&pooled(dets, &matches), total_gts);
    let ap = average_precision(&curve, total_gts)?;
    let image_recall = matches
        .iter()
        .zip(gts)
        .map(|(m, g)| (!g.is_empty()).then(|| m.iter().flatten().count() as f64 / g.len() as f64))
        .collect();
    Ok(EvalResult {
        tpr_at: budgets.iter().map(|&b| (b, tpr_at_fp(&curve, b))).collect(),
        matches,
        image_recall,
        curve,
        ap,
        total_gts,
        total_dets: dets.iter().map(Vec::len).sum(),
    })
}

impl EvalResult {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("threshold,cum_fp,tpr,precision,recall\n");
        for p in &self.curve {
            let _ = writeln!(out, "{},{},{},{},{}", p.threshold, p.cum_fp, p.tpr, p.precision, p.recall);
        }
        out
    }

    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            ap: self.ap,
            tpr_at_fp: self.tpr_at.iter().map(|(b, t)| (b.to_string(), *t)).collect(),
            num_images: self.matches.len(),
            num_gts: self.total_gts,
            num_dets: self.total_dets,
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn d(b: BBox, score: f64, anchor: usize) -> Detection {
        Detection { bbox: b, score, anchor }
    }

    fn sq(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    #[test]
    fn exact_dets_all_match() {
        let gts = vec![sq(0.0), sq(20.0), sq(40.0)];
        let dets: Vec<_> = gts.iter().enumerate().map(|(i, g)| d(*g, 0.9, i)).collect();
        assert_eq!(match_detections(&dets, &gts, 0.5), vec![Some(0), Some(1), Some(2)]);
        let far = vec![d(sq(100.0), 0.9, 0)];
        assert_eq!(match_detections(&far, &gts, 0.5), vec![None]);
    }

    #[test]
    fn higher_score_claims_gt_first() {
        let gts = vec![sq(0.0)];
        let dets = vec![d(sq(1.0), 0.5, 0), d(sq(3.0), 0.9, 1)];
        assert_eq!(match_detections(&dets, &gts, 0.5), vec![None, Some(0)]);
    }

    /// Exhaustive oracle: walk detections in rank order, and for each one try
    /// every gt, keeping the best IoU among those not yet used.
    fn oracle(dets: &[Detection], gts: &[BBox], iou_min: f64) -> Vec<Option<usize>> {
        let mut idx: Vec<usize> = (0..dets.len()).collect();
        idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        let mut used = std::collections::HashSet::new();
        let mut out = vec![None; dets.len()];
        for i in idx {
            let cands: Vec<(usize, f64)> = (0..gts.len())
                .filter(|g| !used.contains(g))
                .map(|g| (g, iou(&dets[i].bbox, &gts[g])))
                .filter(|&(_, v)| v >= iou_min)
                .collect();
            let top = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            if let Some(&(g, _)) = cands.iter().find(|c| c.1 == top) {
                used.insert(g);
                out[i] = Some(g);
            }
        }
        out
    }

    #[test]
    fn five_dets_three_gts_vs_oracle() {
        let gts = vec![sq(0.0), sq(6.0), sq(30.0)];
        let dets = vec![
            d(sq(2.0), 0.8, 0),
            d(sq(4.0), 0.7, 1),
            d(sq(1.0), 0.95, 2),
            d(sq(31.0), 0.3, 3),
            d(sq(29.0), 0.6, 4),
        ];
        let got = match_detections(&dets, &gts, 0.5);
        assert_eq!(got, oracle(&dets, &gts, 0.5));
        assert_eq!(got, vec![None, Some(1), Some(0), None, Some(2)]);
    }

    #[test]
    fn ten_det_sweep_by_hand() {
        // Scores 1.0..0.1; hits at ranks 1, 2, 4, 7 of 5 gts.
        let hits = [true, true, false, true, false, false, true, false, false, false];
        let scored: Vec<_> = hits.iter().enumerate().map(|(i, &h)| (1.0 - i as f64 / 10.0, h)).collect();
        let curve = sweep(&scored, 5);
        assert_eq!(curve.len(), 10);
        assert_eq!(tpr_at_fp(&curve, 0), 0.4);
        assert_eq!(tpr_at_fp(&curve, 1), 0.6);
        assert_eq!(tpr_at_fp(&curve, 2), 0.6);
        assert_eq!(tpr_at_fp(&curve, 3), 0.8);
        assert_eq!(tpr_at_fp(&curve, 6), 0.8);
        assert_eq!(tpr_at_fp(&curve, 100), 0.8);
        // AP: recall steps 0.2@1, 0.2@1, 0.2@0.75, 0.2@4/7.
        let ap = average_precision(&curve, 5).unwrap();
        assert!((ap - (0.2 + 0.2 + 0.2 * 0.75 + 0.2 * 4.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn six_det_staircase_ap() {
        let hits = [true, false, true, false, false, true];
        let scored: Vec<_> = hits.iter().enumerate().map(|(i, &h)| (0.9 - i as f64 * 0.1, h)).collect();
        let curve = sweep(&scored, 4);
        // Precisions at hits: 1, 2/3, 1/2; each adds recall 1/4.
        let want = 0.25 * 1.0 + 0.25 * (2.0 / 3.0) + 0.25 * 0.5;
        assert!((average_precision(&curve, 4).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn degenerate_detectors() {
        let perfect = sweep(&[(0.9, true), (0.8, true)], 2);
        assert_eq!(tpr_at_fp(&perfect, 0), 1.0);
        assert_eq!(average_precision(&perfect, 2).unwrap(), 1.0);
        let junk = sweep(&[(0.9, false), (0.8, false)], 2);
        assert_eq!(tpr_at_fp(&junk, 0), 0.0);
        assert_eq!(tpr_at_fp(&junk, 10), 0.0);
        assert_eq!(average_precision(&junk, 2).unwrap(), 0.0);
        assert!(average_precision(&junk, 0).is_err());
    }

    #[test]
    fn tied_scores_form_one_point() {
        let curve = sweep(&[(0.5, true), (0.5, false), (0.4, true)], 2);
        assert_eq!(curve.len(), 2);
        assert_eq!((curve[0].cum_tp, curve[0].cum_fp), (1, 1));
        assert_eq!(tpr_at_fp(&curve, 0), 0.0);
    }

    #[test]
    fn budget_scaling() {
        assert_eq!(scaled_budget(1000, 5171), 1000);
        assert_eq!(scaled_budget(100, 200), 4);
        assert_eq!(scaled_budget(100, 0), 0);
    }

    #[test]
    fn evaluate_end_to_end() {
        let gts = vec![vec![sq(0.0)], vec![], vec![sq(0.0), sq(50.0)]];
        let dets = vec![
            vec![d(sq(0.0), 0.9, 0), d(sq(70.0), 0.2, 1)],
            vec![d(sq(0.0), 0.5, 0)],
            vec![d(sq(50.0), 0.8, 3)],
        ];
        let r = evaluate(&dets, &gts, 0.5, &[0, 1]).unwrap();
        assert_eq!(r.image_recall, vec![Some(1.0), None, Some(0.5)]);
        assert_eq!(r.tpr_at, vec![(0, 2.0 / 3.0), (1, 2.0 / 3.0)]);
        let s = r.summary();
        assert_eq!(s.num_dets, 4);
        assert!(r.curve_csv().starts_with("threshold,cum_fp,tpr,precision,recall\n0.9,0,"));
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"tpr_at_fp\":{\"0\":"));
        assert!(evaluate(&dets, &gts[..2], 0.5, &[]).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (Vec<(f64, bool)>, usize)> {
        (prop::collection::vec((0u8..30, any::<bool>()), 0..40), 0usize..10).prop_map(|(v, extra)| {
            let hits = v.iter().filter(|x| x.1).count();
            (v.into_iter().map(|(s, h)| (s as f64 / 30.0, h)).collect(), hits + extra + 1)
        })
    }

    proptest! {
        #[test]
        fn tpr_monotone_in_budget((scored, n) in arb_case()) {
            let curve = sweep(&scored, n);
            let t: Vec<f64> = (0..45).map(|b| tpr_at_fp(&curve, b)).collect();
            prop_assert!(t.windows(2).all(|w| w[0] <= w[1]));
            for p in curve.windows(2) {
                prop_assert!(p[0].tpr <= p[1].tpr && p[0].cum_fp <= p[1].cum_fp);
            }
        }

        #[test]
        fn ap_bounded_and_transform_invariant((scored, n) in arb_case()) {
            let ap = average_precision(&sweep(&scored, n), n).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
            let moved: Vec<_> = scored.iter().map(|&(s, h)| (s.exp() * 3.0 - 2.0, h)).collect();
            let ap2 = average_precision(&sweep(&moved, n), n).unwrap();
            prop_assert!((ap - ap2).abs() < 1e-12);
        }

        #[test]
        fn lower_duplicates_never_raise_ap((scored, n) in arb_case()) {
            let ap = average_precision(&sweep(&scored, n), n).unwrap();
            let mut dup = scored.clone();
            dup.extend(scored.iter().map(|&(s, _)| (s - 1.0, false)));
            let ap2 = average_precision(&sweep(&dup, n), n).unwrap();
            prop_assert!(ap2 <= ap + 1e-12);
        }

        #[test]
        fn matching_is_one_to_one(
            boxes in prop::collection::vec((0.0..40.0f64, 0.0..40.0f64, 0.0..1.0f64), 0..12),
            gts in prop::collection::vec((0.0..40.0f64, 0.0..40.0f64), 0..6),
            thr in 0.1..0.9f64,
        ) {
            let gts: Vec<BBox> = gts.iter().map(|&(x, y)| BBox::from_center(x, y, 10.0, 10.0)).collect();
            let dets: Vec<Detection> = boxes.iter().enumerate()
                .map(|(i, &(x, y, s))| d(BBox::from_center(x, y, 10.0, 10.0), s, i)).collect();
            let m = match_detections(&dets, &gts, thr);
            let used: Vec<usize> = m.iter().flatten().copied().collect();
            let mut uniq = used.clone();
            uniq.sort();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), used.len());
            prop_assert_eq!(m, oracle(&dets, &gts, thr));
        }
    }
}
