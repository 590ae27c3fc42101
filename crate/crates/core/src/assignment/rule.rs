//! IoU-to-label functions.
//!
//! Four rule shapes are supported. All share a negative bound (`iou <
//! bound_neg` is background) and differ in what they assign above the
//! positive bound:
//!
//! | rule       | positive target                                        |
//! |------------|--------------------------------------------------------|
//! | `Binary`   | 1 when `iou > bound_pos`                               |
//! | `Shift`    | `min(iou + shift, 1)` when `iou > bound_pos`           |
//! | `SplitOne` | `score_1` on `(bound_pos, bound_1)`, 1 on `[bound_1, 1]` |
//! | `SplitTwo` | `score_1` on `(bound_pos, bound_1)`, `score_2` on `[bound_1, bound_2)`, 1 on `[bound_2, 1]` |
//!
//! Anything not covered by a branch is ignored. Rules have a compact text
//! form, e.g. `pos0.4+split_0.4_0.8_0.5_0.9` or `neg0.1+pos0.2+all=1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const DEFAULT_BOUND_NEG: f64 = 0.3;
pub const DEFAULT_BOUND_POS: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelRule {
    Binary {
        bound_pos: f64,
        bound_neg: f64,
    },
    Shift {
        bound_pos: f64,
        bound_neg: f64,
        shift: f64,
    },
    SplitOne {
        bound_pos: f64,
        bound_neg: f64,
        bound_1: f64,
        score_1: f64,
    },
    SplitTwo {
        bound_pos: f64,
        bound_neg: f64,
        bound_1: f64,
        score_1: f64,
        bound_2: f64,
        score_2: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Negative,
    Ignore,
    Positive(f64),
}

impl AnchorLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive(_))
    }

    pub fn is_ignore(&self) -> bool {
        matches!(self, AnchorLabel::Ignore)
    }

    /// Training target for non-ignored anchors.
    pub fn target(&self) -> Option<f64> {
        match *self {
            AnchorLabel::Negative => Some(0.0),
            AnchorLabel::Ignore => None,
            AnchorLabel::Positive(t) => Some(t),
        }
    }
}

impl Default for LabelRule {
    /// The classic two-threshold rule (`0.7` / `0.3`).
    fn default() -> Self {
        LabelRule::Binary {
            bound_pos: 0.7,
            bound_neg: 0.3,
        }
    }
}

fn in_unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

fn is_score(v: f64) -> bool {
    v > 0.0 && v <= 1.0
}

impl LabelRule {
    pub fn binary(bound_pos: f64, bound_neg: f64) -> Result<Self> {
        LabelRule::Binary { bound_pos, bound_neg }.validated()
    }

    pub fn shift(bound_pos: f64, bound_neg: f64, shift: f64) -> Result<Self> {
        LabelRule::Shift {
            bound_pos,
            bound_neg,
            shift,
        }
        .validated()
    }

    pub fn split_one(bound_pos: f64, bound_neg: f64, bound_1: f64, score_1: f64) -> Result<Self> {
        LabelRule::SplitOne {
            bound_pos,
            bound_neg,
            bound_1,
            score_1,
        }
        .validated()
    }

    pub fn split_two(
        bound_pos: f64,
        bound_neg: f64,
        bound_1: f64,
        score_1: f64,
        bound_2: f64,
        score_2: f64,
    ) -> Result<Self> {
        LabelRule::SplitTwo {
            bound_pos,
            bound_neg,
            bound_1,
            score_1,
            bound_2,
            score_2,
        }
        .validated()
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn bound_pos(&self) -> f64 {
        match *self {
            LabelRule::Binary { bound_pos, .. }
            | LabelRule::Shift { bound_pos, .. }
            | LabelRule::SplitOne { bound_pos, .. }
            | LabelRule::SplitTwo { bound_pos, .. } => bound_pos,
        }
    }

    pub fn bound_neg(&self) -> f64 {
        match *self {
            LabelRule::Binary { bound_neg, .. }
            | LabelRule::Shift { bound_neg, .. }
            | LabelRule::SplitOne { bound_neg, .. }
            | LabelRule::SplitTwo { bound_neg, .. } => bound_neg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (pos, neg) = (self.bound_pos(), self.bound_neg());
        let bad = |msg: &str| Err(Error::invalid(format!("label rule {self}: {msg}")));
        if !(in_unit(neg) && in_unit(pos) && neg <= pos) {
            return bad("need 0 <= bound_neg <= bound_pos <= 1");
        }
        match *self {
            LabelRule::Binary { .. } => {}
            LabelRule::Shift { shift, .. } => {
                if !(shift >= 0.0 && shift.is_finite()) {
                    return bad("shift must be >= 0");
                }
            }
            LabelRule::SplitOne {
                bound_1, score_1, ..
            } => {
                if !(pos <= bound_1 && bound_1 <= 1.0) {
                    return bad("need bound_pos <= bound_1 <= 1");
                }
                if !is_score(score_1) {
                    return bad("score_1 must lie in (0, 1]");
                }
            }
            LabelRule::SplitTwo {
                bound_1,
                score_1,
                bound_2,
                score_2,
                ..
            } => {
                if !(pos <= bound_1 && bound_1 <= bound_2 && bound_2 <= 1.0) {
                    return bad("need bound_pos <= bound_1 <= bound_2 <= 1");
                }
                if !(is_score(score_1) && is_score(score_2) && score_1 <= score_2) {
                    return bad("need 0 < score_1 <= score_2 <= 1");
                }
            }
        }
        Ok(())
    }

    /// Smallest target this rule hands to a positive anchor with the given
    /// IoU; used when an anchor is promoted by forced matching.
    pub fn floor_score(&self, iou: f64) -> f64 {
        match *self {
            LabelRule::Binary { .. } => 1.0,
            LabelRule::Shift { shift, .. } => (iou + shift).min(1.0),
            LabelRule::SplitOne { score_1, .. } | LabelRule::SplitTwo { score_1, .. } => score_1,
        }
    }

    /// Every value a positive target can take, when the set is finite.
    pub fn positive_levels(&self) -> Option<Vec<f64>> {
        match *self {
            LabelRule::Binary { .. } => Some(vec![1.0]),
            LabelRule::Shift { .. } => None,
            LabelRule::SplitOne { score_1, .. } => Some(vec![score_1, 1.0]),
            LabelRule::SplitTwo {
                score_1, score_2, ..
            } => Some(vec![score_1, score_2, 1.0]),
        }
    }
}

/// Evaluates the rule on one IoU value.
pub fn label_of(rule: &LabelRule, iou: f64) -> Result<AnchorLabel> {
    if !in_unit(iou) {
        return Err(Error::invalid(format!("iou {iou} outside [0, 1]")));
    }
    Ok(label_unchecked(rule, iou))
}

#[inline]
pub(crate) fn label_unchecked(rule: &LabelRule, iou: f64) -> AnchorLabel {
    use AnchorLabel::*;
    if iou < rule.bound_neg() {
        return Negative;
    }
    match *rule {
        LabelRule::Binary { bound_pos, .. } => {
            if iou > bound_pos {
                Positive(1.0)
            } else {
                Ignore
            }
        }
        LabelRule::Shift {
            bound_pos, shift, ..
        } => {
            if iou > bound_pos {
                Positive(if iou + shift < 1.0 { iou + shift } else { 1.0 })
            } else {
                Ignore
            }
        }
        LabelRule::SplitOne {
            bound_pos,
            bound_1,
            score_1,
            ..
        } => {
            if iou >= bound_1 {
                Positive(1.0)
            } else if iou > bound_pos {
                Positive(score_1)
            } else {
                Ignore
            }
        }
        LabelRule::SplitTwo {
            bound_pos,
            bound_1,
            score_1,
            bound_2,
            score_2,
            ..
        } => {
            if iou >= bound_2 {
                Positive(1.0)
            } else if iou >= bound_1 {
                Positive(score_2)
            } else if iou > bound_pos {
                Positive(score_1)
            } else {
                Ignore
            }
        }
    }
}

impl fmt::Display for LabelRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let neg = self.bound_neg();
        if neg != DEFAULT_BOUND_NEG {
            write!(f, "neg{neg}+")?;
        }
        write!(f, "pos{}+", self.bound_pos())?;
        match *self {
            LabelRule::Binary { .. } => write!(f, "all=1"),
            LabelRule::Shift { shift, .. } => write!(f, "add{shift}"),
            LabelRule::SplitOne {
                bound_1, score_1, ..
            } => write!(f, "split_{bound_1}_{score_1}"),
            LabelRule::SplitTwo {
                bound_1,
                score_1,
                bound_2,
                score_2,
                ..
            } => write!(f, "split_{bound_1}_{score_1}_{bound_2}_{score_2}"),
        }
    }
}

enum Kind {
    All,
    Add(f64),
    Split(Vec<f64>),
}

impl FromStr for LabelRule {
    type Err = Error;

    /// Parses `[neg<x>+][pos<x>+]<kind>` where kind is `all=1`, `add<A>`,
    /// `split_<b1>_<s1>` or `split_<b1>_<s1>_<b2>_<s2>`. Missing bounds
    /// default to `neg0.3` and `pos0.4`; a missing kind means `all=1`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::invalid(format!("label rule `{s}`: {msg}"));
        let num = |t: &str| -> Result<f64> {
            t.parse::<f64>()
                .map_err(|_| bad(format!("`{t}` is not a number")))
        };
        let mut neg = None;
        let mut pos = None;
        let mut kind = None;
        for part in s.trim().split('+').map(str::trim) {
            let set_kind = |kind: &mut Option<Kind>, k: Kind| {
                if kind.replace(k).is_some() {
                    Err(bad("more than one rule kind".into()))
                } else {
                    Ok(())
                }
            };
            if let Some(v) = part.strip_prefix("neg") {
                neg = Some(num(v)?);
            } else if let Some(v) = part.strip_prefix("pos") {
                pos = Some(num(v)?);
            } else if part == "all=1" {
                set_kind(&mut kind, Kind::All)?;
            } else if let Some(v) = part.strip_prefix("add") {
                set_kind(&mut kind, Kind::Add(num(v)?))?;
            } else if let Some(v) = part.strip_prefix("split_") {
                let vals = v.split('_').map(num).collect::<Result<Vec<_>>>()?;
                if vals.len() != 2 && vals.len() != 4 {
                    return Err(bad("split takes 2 or 4 numbers".into()));
                }
                set_kind(&mut kind, Kind::Split(vals))?;
            } else {
                return Err(bad(format!("unknown component `{part}`")));
            }
        }
        let bound_neg = neg.unwrap_or(DEFAULT_BOUND_NEG);
        let bound_pos = pos.unwrap_or(DEFAULT_BOUND_POS);
        match kind.unwrap_or(Kind::All) {
            Kind::All => LabelRule::binary(bound_pos, bound_neg),
            Kind::Add(a) => LabelRule::shift(bound_pos, bound_neg, a),
            Kind::Split(v) if v.len() == 2 => LabelRule::split_one(bound_pos, bound_neg, v[0], v[1]),
            Kind::Split(v) => LabelRule::split_two(bound_pos, bound_neg, v[0], v[1], v[2], v[3]),
        }
    }
}

impl Serialize for LabelRule {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LabelRule {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn best() -> LabelRule {
        "pos0.4+split_0.4_0.8_0.5_0.9".parse().unwrap()
    }

    #[test]
    fn split_two_examples() {
        let r = best();
        assert_eq!(
            r,
            LabelRule::split_two(0.4, 0.3, 0.4, 0.8, 0.5, 0.9).unwrap()
        );
        assert_eq!(label_of(&r, 0.45).unwrap(), AnchorLabel::Positive(0.9));
        assert_eq!(label_of(&r, 0.65).unwrap(), AnchorLabel::Positive(1.0));
        assert_eq!(label_of(&r, 0.2).unwrap(), AnchorLabel::Negative);
        assert_eq!(label_of(&r, 0.35).unwrap(), AnchorLabel::Ignore);
        // bound_1 == bound_pos: the score_1 band is empty, 0.4 itself lands in the score_2 band
        assert_eq!(label_of(&r, 0.4).unwrap(), AnchorLabel::Positive(0.9));
        assert_eq!(label_of(&r, 0.5).unwrap(), AnchorLabel::Positive(1.0));
    }

    #[test]
    fn shift_example() {
        let r = LabelRule::shift(0.4, 0.3, 0.6).unwrap();
        assert_eq!(label_of(&r, 0.5).unwrap(), AnchorLabel::Positive(1.0));
        match label_of(&r, 0.41).unwrap() {
            AnchorLabel::Positive(t) => assert!((t - (0.41 + 0.6f64).min(1.0)).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
        let r = LabelRule::shift(0.4, 0.3, 0.2).unwrap();
        assert_eq!(label_of(&r, 0.5).unwrap(), AnchorLabel::Positive(0.5 + 0.2));
    }

    #[test]
    fn strict_bounds_are_ignored() {
        let r = LabelRule::binary(0.7, 0.3).unwrap();
        assert_eq!(label_of(&r, 0.3).unwrap(), AnchorLabel::Ignore);
        assert_eq!(label_of(&r, 0.7).unwrap(), AnchorLabel::Ignore);
        assert_eq!(label_of(&r, 0.7000001).unwrap(), AnchorLabel::Positive(1.0));
        let r = LabelRule::split_one(0.4, 0.3, 0.7, 0.8).unwrap();
        assert_eq!(label_of(&r, 0.4).unwrap(), AnchorLabel::Ignore);
        assert_eq!(label_of(&r, 0.7).unwrap(), AnchorLabel::Positive(1.0));
        assert_eq!(label_of(&r, 0.69).unwrap(), AnchorLabel::Positive(0.8));
    }

    #[test]
    fn out_of_range_iou_rejected() {
        let r = LabelRule::default();
        assert!(label_of(&r, -0.01).is_err());
        assert!(label_of(&r, 1.01).is_err());
        assert!(label_of(&r, f64::NAN).is_err());
    }

    #[test]
    fn invalid_rules_rejected() {
        assert!(LabelRule::binary(0.2, 0.3).is_err());
        assert!(LabelRule::shift(0.4, 0.3, -0.1).is_err());
        assert!(LabelRule::split_one(0.4, 0.3, 0.3, 0.8).is_err());
        assert!(LabelRule::split_one(0.4, 0.3, 0.7, 0.0).is_err());
        assert!(LabelRule::split_two(0.4, 0.3, 0.6, 0.8, 0.5, 0.9).is_err());
        assert!(LabelRule::split_two(0.4, 0.3, 0.4, 0.95, 0.5, 0.9).is_err());
    }

    #[test]
    fn names_round_trip() {
        for name in [
            "pos0.7+all=1",
            "pos0.4+add0.6",
            "pos0.4+split_0.7_0.8",
            "pos0.4+split_0.4_0.8_0.5_0.9",
            "neg0.1+pos0.2+all=1",
        ] {
            let r: LabelRule = name.parse().unwrap();
            assert_eq!(r.to_string(), name);
        }
        let short: LabelRule = "split_0.4_0.8_0.5_0.9".parse().unwrap();
        assert_eq!(short, best());
        assert!("pos0.4+bogus".parse::<LabelRule>().is_err());
        assert!("pos0.4+add0.1+all=1".parse::<LabelRule>().is_err());
        assert!("split_0.4".parse::<LabelRule>().is_err());
    }

    #[test]
    fn serde_uses_name() {
        let json = serde_json::to_string(&best()).unwrap();
        assert_eq!(json, "\"pos0.4+split_0.4_0.8_0.5_0.9\"");
        let back: LabelRule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, best());
    }

    #[test]
    fn binary_only_produces_hard_targets() {
        let r = LabelRule::binary(0.7, 0.3).unwrap();
        for i in 0..=1000 {
            let l = label_unchecked(&r, i as f64 / 1000.0);
            assert!(matches!(l, AnchorLabel::Negative | AnchorLabel::Ignore | AnchorLabel::Positive(1.0)));
        }
    }

    pub(crate) fn arb_rule() -> impl Strategy<Value = LabelRule> {
        let bounds = || (0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(a, b)| (a.max(b), a.min(b)));
        prop_oneof![
            bounds().prop_map(|(p, n)| LabelRule::Binary { bound_pos: p, bound_neg: n }),
            (bounds(), 0.0..1.5f64).prop_map(|((p, n), a)| LabelRule::Shift { bound_pos: p, bound_neg: n, shift: a }),
            (bounds(), 0.0..=1.0f64, 0.01..=1.0f64).prop_map(|((p, n), t, s)| LabelRule::SplitOne {
                bound_pos: p,
                bound_neg: n,
                bound_1: p + (1.0 - p) * t,
                score_1: s,
            }),
            (bounds(), 0.0..=1.0f64, 0.0..=1.0f64, 0.01..=1.0f64, 0.0..=1.0f64).prop_map(
                |((p, n), t1, t2, s1, u)| {
                    let b1 = p + (1.0 - p) * t1;
                    LabelRule::SplitTwo {
                        bound_pos: p,
                        bound_neg: n,
                        bound_1: b1,
                        score_1: s1,
                        bound_2: b1 + (1.0 - b1) * t2,
                        score_2: s1 + (1.0 - s1) * u,
                    }
                }
            ),
        ]
    }

    proptest! {
        #[test]
        fn generated_rules_validate(rule in arb_rule()) {
            prop_assert!(rule.validate().is_ok());
        }

        #[test]
        fn shift_saturates(p in 0.0..=1.0f64, a in 0.0..=1.0f64, iou in 0.0..=1.0f64) {
            let rule = LabelRule::Shift { bound_pos: p, bound_neg: p.min(0.3), shift: a };
            if iou > p {
                prop_assert_eq!(label_unchecked(&rule, iou), AnchorLabel::Positive((iou + a).min(1.0)));
            }
        }
    }
}
