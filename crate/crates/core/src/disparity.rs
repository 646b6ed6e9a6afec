//! Error-rate gaps across demographic axes and between multi-axis groups
//! and their constituent axes.
//!
//! Group rates are conditioned so that singleton and pair groups have
//! disjoint positive supports: a pair `{m, m'}`'s FNR is measured on
//! instances whose gold set is exactly `{m, m'}`, and axis `m`'s FNR on
//! instances whose gold set is exactly `{m}`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::metrics::Labeled;
use crate::taxonomy::{Axis, LabelSet};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum DisparityError {
    #[error("a disparity group must hold one or two axes, got {0}")]
    InvalidGroup(usize),
    #[error("at least two defined rates are needed, got {0}")]
    InsufficientGroups(usize),
    #[error("{kind} undefined for group {group}: no {support} support")]
    UndefinedRate {
        group: String,
        kind: RateKind,
        support: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateKind {
    Fnr,
    Fpr,
}

impl fmt::Display for RateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RateKind::Fnr => "FNR",
            RateKind::Fpr => "FPR",
        })
    }
}

/// Population over which a group's false positive rate is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FprBase {
    /// Gold set shares no axis with the group.
    #[default]
    Disjoint,
    /// Gold set is empty.
    UnbiasedOnly,
}

/// What counts as missing a positive instance of a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FnRule {
    /// The prediction must cover every axis of the group.
    #[default]
    Coverage,
    /// Only a prediction of "unbiased" counts as a miss.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DisparityOptions {
    #[serde(default)]
    pub fpr_base: FprBase,
    #[serde(default)]
    pub fn_rule: FnRule,
}

/// One axis or a pair of axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AxisGroup(LabelSet);

impl AxisGroup {
    pub fn new(axes: LabelSet) -> Result<Self, DisparityError> {
        match axes.len() {
            1 | 2 => Ok(Self(axes)),
            n => Err(DisparityError::InvalidGroup(n)),
        }
    }

    pub fn single(axis: Axis) -> Self {
        Self(LabelSet::single(axis))
    }

    /// Two distinct axes.
    pub fn pair(a: Axis, b: Axis) -> Result<Self, DisparityError> {
        if a == b {
            return Err(DisparityError::InvalidGroup(1));
        }
        Self::new(LabelSet::single(a).with(b))
    }

    pub fn labels(&self) -> LabelSet {
        self.0
    }
}

impl fmt::Display for AxisGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.0.codes().join(","))
    }
}

impl Serialize for AxisGroup {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for AxisGroup {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        AxisGroup::new(LabelSet::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub group: AxisGroup,
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
    pub support_pos: usize,
    pub support_neg: usize,
}

impl GroupRates {
    pub fn rate(&self, kind: RateKind) -> Option<f64> {
        match kind {
            RateKind::Fnr => self.fnr,
            RateKind::Fpr => self.fpr,
        }
    }
}

pub fn group_rates<P: Labeled>(pairs: &[P], group: AxisGroup, options: &DisparityOptions) -> GroupRates {
    let g = group.labels();
    let (mut pos, mut missed, mut neg, mut false_pos) = (0usize, 0usize, 0usize, 0usize);
    for p in pairs {
        let (gold, pred) = (p.gold(), p.pred());
        if gold == g {
            pos += 1;
            let miss = match options.fn_rule {
                FnRule::Coverage => !pred.is_superset(g),
                FnRule::Binary => pred.is_empty(),
            };
            missed += usize::from(miss);
        }
        let in_base = match options.fpr_base {
            FprBase::Disjoint => gold.is_disjoint(g),
            FprBase::UnbiasedOnly => gold.is_empty(),
        };
        if in_base {
            neg += 1;
            false_pos += usize::from(pred.is_superset(g));
        }
    }
    GroupRates {
        group,
        fnr: (pos > 0).then(|| missed as f64 / pos as f64),
        fpr: (neg > 0).then(|| false_pos as f64 / neg as f64),
        support_pos: pos,
        support_neg: neg,
    }
}

pub fn per_axis_rates<P: Labeled>(pairs: &[P], options: &DisparityOptions) -> BTreeMap<Axis, GroupRates> {
    Axis::ALL
        .into_iter()
        .map(|a| (a, group_rates(pairs, AxisGroup::single(a), options)))
        .collect()
}

/// Defined rates of one kind, keyed by axis.
pub fn defined_rates(rates: &BTreeMap<Axis, GroupRates>, kind: RateKind) -> BTreeMap<Axis, f64> {
    rates
        .iter()
        .filter_map(|(a, r)| r.rate(kind).map(|v| (*a, v)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxGap {
    pub delta: f64,
    /// In canonical axis order.
    pub argmax_pair: (Axis, Axis),
}

/// Largest absolute difference between any two rates; ties go to the pair
/// that comes first in canonical axis order.
pub fn max_gap(rates: &BTreeMap<Axis, f64>) -> Result<MaxGap, DisparityError> {
    if rates.len() < 2 {
        return Err(DisparityError::InsufficientGroups(rates.len()));
    }
    let entries: Vec<(Axis, f64)> = rates.iter().map(|(a, r)| (*a, *r)).collect();
    let mut best: Option<MaxGap> = None;
    for (i, &(a, ra)) in entries.iter().enumerate() {
        for &(b, rb) in &entries[i + 1..] {
            let d = (ra - rb).abs();
            if best.is_none_or(|g| d > g.delta) {
                best = Some(MaxGap {
                    delta: d,
                    argmax_pair: (a, b),
                });
            }
        }
    }
    Ok(best.expect("at least one pair"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiAxisGap {
    pub group: AxisGroup,
    pub kind: RateKind,
    pub g: f64,
    pub pair_rate: f64,
    /// Rates of the two constituent axes, in canonical order.
    pub constituent_rates: [(Axis, f64); 2],
}

/// `max over x in {m, m'} of |rate({m,m'}) - rate({x})|`.
pub fn multi_axis_gap<P: Labeled>(
    pairs: &[P],
    pair: (Axis, Axis),
    kind: RateKind,
    options: &DisparityOptions,
) -> Result<MultiAxisGap, DisparityError> {
    let group = AxisGroup::pair(pair.0, pair.1)?;
    let rate_of = |group: AxisGroup| {
        let r = group_rates(pairs, group, options);
        r.rate(kind).ok_or(DisparityError::UndefinedRate {
            group: group.to_string(),
            kind,
            support: match kind {
                RateKind::Fnr => "positive",
                RateKind::Fpr => "negative",
            },
        })
    };
    let pair_rate = rate_of(group)?;
    let mut axes: Vec<Axis> = group.labels().axes().collect();
    axes.sort();
    let ra = rate_of(AxisGroup::single(axes[0]))?;
    let rb = rate_of(AxisGroup::single(axes[1]))?;
    Ok(MultiAxisGap {
        group,
        kind,
        g: (pair_rate - ra).abs().max((pair_rate - rb).abs()),
        pair_rate,
        constituent_rates: [(axes[0], ra), (axes[1], rb)],
    })
}

/// Gaps that could not be computed are recorded with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry<T> {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl<T> From<Result<T, DisparityError>> for GapEntry<T> {
    fn from(r: Result<T, DisparityError>) -> Self {
        match r {
            Ok(v) => Self {
                value: Some(v),
                error: None,
            },
            Err(e) => Self {
                value: None,
                error: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGapEntry {
    pub group: AxisGroup,
    pub rate_kind: RateKind,
    #[serde(flatten)]
    pub gap: GapEntry<MultiAxisGap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityReport {
    pub options: DisparityOptions,
    pub per_axis: BTreeMap<Axis, GroupRates>,
    pub delta_fnr: GapEntry<MaxGap>,
    pub delta_fpr: GapEntry<MaxGap>,
    pub pair_gaps: Vec<PairGapEntry>,
}

/// The configured pair groups used when none are given.
pub fn default_pair_groups() -> Vec<(Axis, Axis)> {
    vec![(Axis::Gen, Axis::So), (Axis::Gen, Axis::Rac)]
}

pub fn disparity_report<P: Labeled>(
    pairs: &[P],
    pair_groups: &[(Axis, Axis)],
    options: &DisparityOptions,
) -> Result<DisparityReport, DisparityError> {
    let per_axis = per_axis_rates(pairs, options);
    let delta_fnr = max_gap(&defined_rates(&per_axis, RateKind::Fnr)).into();
    let delta_fpr = max_gap(&defined_rates(&per_axis, RateKind::Fpr)).into();
    let mut pair_gaps = Vec::new();
    for &(a, b) in pair_groups {
        let group = AxisGroup::pair(a, b)?;
        for kind in [RateKind::Fnr, RateKind::Fpr] {
            pair_gaps.push(PairGapEntry {
                group,
                rate_kind: kind,
                gap: multi_axis_gap(pairs, (a, b), kind, options).into(),
            });
        }
    }
    Ok(DisparityReport {
        options: *options,
        per_axis,
        delta_fnr,
        delta_fpr,
        pair_gaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::LabelPair;

    fn ls(axes: &[Axis]) -> LabelSet {
        axes.iter().copied().collect()
    }

    #[test]
    fn singleton_fnr_counts_misses() {
        let mut pairs = Vec::new();
        for i in 0..10 {
            let pred = if i < 3 { LabelSet::EMPTY } else { ls(&[Axis::Gen]) };
            pairs.push(LabelPair::new(ls(&[Axis::Gen]), pred));
        }
        // multi-axis positives must not leak into the singleton rate
        pairs.push(LabelPair::new(ls(&[Axis::Gen, Axis::Rac]), LabelSet::EMPTY));
        let r = group_rates(&pairs, AxisGroup::single(Axis::Gen), &DisparityOptions::default());
        assert_eq!(r.fnr, Some(0.3));
        assert_eq!(r.support_pos, 10);
        assert_eq!(r.fpr, None);
        assert_eq!(r.support_neg, 0);
    }

    #[test]
    fn pair_fnr_requires_full_coverage() {
        let pairs = [LabelPair::new(ls(&[Axis::Gen, Axis::Rac]), ls(&[Axis::Gen]))];
        let g = AxisGroup::pair(Axis::Gen, Axis::Rac).unwrap();
        let cov = group_rates(&pairs, g, &DisparityOptions::default());
        assert_eq!(cov.fnr, Some(1.0));
        let binary = DisparityOptions {
            fn_rule: FnRule::Binary,
            ..Default::default()
        };
        assert_eq!(group_rates(&pairs, g, &binary).fnr, Some(0.0));
    }

    #[test]
    fn no_positive_support_is_undefined() {
        let pairs = [LabelPair::new(LabelSet::EMPTY, ls(&[Axis::Gen]))];
        let r = group_rates(&pairs, AxisGroup::single(Axis::Age), &DisparityOptions::default());
        assert_eq!(r.fnr, None);
        assert_eq!(r.support_pos, 0);
        assert_eq!(r.fpr, Some(0.0));
    }

    #[test]
    fn fpr_base_switch() {
        let pairs = [
            LabelPair::new(ls(&[Axis::Rac]), ls(&[Axis::Gen])),
            LabelPair::new(LabelSet::EMPTY, LabelSet::EMPTY),
        ];
        let g = AxisGroup::single(Axis::Gen);
        assert_eq!(group_rates(&pairs, g, &DisparityOptions::default()).fpr, Some(0.5));
        let unb = DisparityOptions {
            fpr_base: FprBase::UnbiasedOnly,
            ..Default::default()
        };
        assert_eq!(group_rates(&pairs, g, &unb).fpr, Some(0.0));
    }

    #[test]
    fn max_gap_examples() {
        let rates = BTreeMap::from([(Axis::Gen, 0.10), (Axis::Rac, 0.30), (Axis::Rel, 0.25)]);
        let g = max_gap(&rates).unwrap();
        assert!((g.delta - 0.20).abs() < 1e-15);
        assert_eq!(g.argmax_pair, (Axis::Gen, Axis::Rac));

        let equal = BTreeMap::from([(Axis::So, 0.4), (Axis::Age, 0.4), (Axis::Phy, 0.4)]);
        let g = max_gap(&equal).unwrap();
        assert_eq!(g.delta, 0.0);
        assert_eq!(g.argmax_pair, (Axis::So, Axis::Age));

        assert_eq!(
            max_gap(&BTreeMap::from([(Axis::Gen, 0.1)])),
            Err(DisparityError::InsufficientGroups(1))
        );
    }

    fn rate_pairs(gold: LabelSet, misses: usize, total: usize) -> Vec<LabelPair> {
        (0..total)
            .map(|i| LabelPair::new(gold, if i < misses { LabelSet::EMPTY } else { gold }))
            .collect()
    }

    #[test]
    fn multi_axis_gap_example() {
        // FNR {GEN,SO}=0.5, GEN=0.2, SO=0.45 → 0.3
        let mut pairs = rate_pairs(ls(&[Axis::Gen, Axis::So]), 10, 20);
        pairs.extend(rate_pairs(ls(&[Axis::Gen]), 4, 20));
        pairs.extend(rate_pairs(ls(&[Axis::So]), 9, 20));
        let opts = DisparityOptions::default();
        let g = multi_axis_gap(&pairs, (Axis::Gen, Axis::So), RateKind::Fnr, &opts).unwrap();
        assert!((g.g - 0.3).abs() < 1e-12);
        assert_eq!(g.pair_rate, 0.5);
        let swapped = multi_axis_gap(&pairs, (Axis::So, Axis::Gen), RateKind::Fnr, &opts).unwrap();
        assert_eq!(swapped, g);

        let mut flat = rate_pairs(ls(&[Axis::Gen, Axis::So]), 5, 20);
        flat.extend(rate_pairs(ls(&[Axis::Gen]), 5, 20));
        flat.extend(rate_pairs(ls(&[Axis::So]), 5, 20));
        assert_eq!(
            multi_axis_gap(&flat, (Axis::Gen, Axis::So), RateKind::Fnr, &opts).unwrap().g,
            0.0
        );
    }

    #[test]
    fn multi_axis_gap_names_missing_support() {
        let pairs = rate_pairs(ls(&[Axis::Gen]), 1, 4);
        let err = multi_axis_gap(&pairs, (Axis::Gen, Axis::Rac), RateKind::Fnr, &DisparityOptions::default())
            .unwrap_err();
        match err {
            DisparityError::UndefinedRate { group, .. } => assert_eq!(group, "{GEN,RAC}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            multi_axis_gap(&pairs, (Axis::Gen, Axis::Gen), RateKind::Fnr, &DisparityOptions::default()),
            Err(DisparityError::InvalidGroup(1))
        );
    }

    #[test]
    fn group_validation() {
        assert!(AxisGroup::new(LabelSet::EMPTY).is_err());
        assert!(AxisGroup::new(ls(&[Axis::Gen, Axis::So, Axis::Rac])).is_err());
        let g: AxisGroup = serde_json::from_str(r#"["RAC","GEN"]"#).unwrap();
        assert_eq!(g.to_string(), "{GEN,RAC}");
    }

    #[test]
    fn report_records_undefined_gaps() {
        let pairs = rate_pairs(ls(&[Axis::Gen]), 1, 4);
        let r = disparity_report(&pairs, &default_pair_groups(), &DisparityOptions::default()).unwrap();
        assert!(r.delta_fnr.value.is_none());
        assert!(r.delta_fnr.error.is_some());
        assert_eq!(r.pair_gaps.len(), 4);
        assert!(r.pair_gaps.iter().all(|p| p.gap.value.is_none()));
    }
}
