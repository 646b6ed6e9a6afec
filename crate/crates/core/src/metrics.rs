//! Binary and multi-label detection metrics, latency summaries and
//! percentile bootstrap confidence intervals.
//!
//! The label space has exactly nine positions; UNB is the empty set and is
//! never scored as a class of its own in micro/macro F1.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::taxonomy::{is_biased, Axis, LabelSet};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("no evaluation pairs")]
    EmptyInput,
    #[error("no pair carries latency data")]
    NoLatencyData,
    #[error("metric `{0}` is undefined on the full sample")]
    UndefinedPoint(String),
    #[error("metric `{0}` is undefined on every bootstrap resample")]
    AllResamplesUndefined(String),
    #[error("invalid bootstrap settings: {0}")]
    InvalidSettings(String),
}

/// Gold and predicted labels for one instance.
pub trait Labeled {
    fn gold(&self) -> LabelSet;
    fn pred(&self) -> LabelSet;
    fn invalid(&self) -> bool;
}

/// The copyable core of an evaluation pair, used for resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelPair {
    pub gold: LabelSet,
    pub pred: LabelSet,
    pub invalid: bool,
}

impl LabelPair {
    pub fn new(gold: LabelSet, pred: LabelSet) -> Self {
        Self {
            gold,
            pred,
            invalid: false,
        }
    }
}

impl Labeled for LabelPair {
    fn gold(&self) -> LabelSet {
        self.gold
    }
    fn pred(&self) -> LabelSet {
        self.pred
    }
    fn invalid(&self) -> bool {
        self.invalid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub instance_id: String,
    pub dataset: String,
    pub gold: LabelSet,
    /// Invalid predictions carry the empty set here.
    pub pred: LabelSet,
    pub latency_ms: Option<f64>,
    pub invalid: bool,
}

impl Labeled for EvalPair {
    fn gold(&self) -> LabelSet {
        self.gold
    }
    fn pred(&self) -> LabelSet {
        self.pred
    }
    fn invalid(&self) -> bool {
        self.invalid
    }
}

impl EvalPair {
    pub fn labels(&self) -> LabelPair {
        LabelPair {
            gold: self.gold,
            pred: self.pred,
            invalid: self.invalid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    fn add(&mut self, gold: bool, pred: bool) {
        match (gold, pred) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }
    pub fn fnr(&self) -> Option<f64> {
        ratio(self.fn_, self.fn_ + self.tp)
    }
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }
    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Biased-vs-unbiased metrics; `None` marks a value whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub confusion: Confusion,
    pub f1: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn binary_confusion<P: Labeled>(pairs: &[P]) -> Confusion {
    let mut c = Confusion::default();
    for p in pairs {
        c.add(is_biased(p.gold()), is_biased(p.pred()));
    }
    c
}

pub fn binary_metrics<P: Labeled>(pairs: &[P]) -> BinaryMetrics {
    let c = binary_confusion(pairs);
    BinaryMetrics {
        confusion: c,
        f1: c.f1(),
        fpr: c.fpr(),
        fnr: c.fnr(),
        precision: c.precision(),
        recall: c.recall(),
    }
}

pub fn exact_match_ratio<P: Labeled>(pairs: &[P]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let hits = pairs.iter().filter(|p| p.gold() == p.pred()).count();
    Ok(hits as f64 / pairs.len() as f64)
}

pub fn hamming_loss<P: Labeled>(pairs: &[P]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let wrong: u32 = pairs
        .iter()
        .map(|p| (p.gold().bits() ^ p.pred().bits()).count_ones())
        .sum();
    Ok(f64::from(wrong) / (Axis::COUNT * pairs.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    /// `None` when no axis has any gold or predicted positive.
    pub micro: Option<f64>,
    pub macro_: Option<f64>,
    /// Only axes with at least one gold or predicted positive.
    pub per_axis: BTreeMap<Axis, f64>,
}

pub fn axis_confusions<P: Labeled>(pairs: &[P]) -> [Confusion; 9] {
    let mut out = [Confusion::default(); 9];
    for p in pairs {
        let (g, pr) = (p.gold(), p.pred());
        for a in Axis::ALL {
            out[a.index()].add(g.contains(a), pr.contains(a));
        }
    }
    out
}

pub fn f1_scores<P: Labeled>(pairs: &[P]) -> Result<F1Scores, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let per = axis_confusions(pairs);
    let mut pooled = Confusion::default();
    let mut per_axis = BTreeMap::new();
    for a in Axis::ALL {
        let c = per[a.index()];
        pooled.tp += c.tp;
        pooled.fp += c.fp;
        pooled.fn_ += c.fn_;
        if let Some(f1) = c.f1() {
            per_axis.insert(a, f1);
        }
    }
    let macro_ = (!per_axis.is_empty()).then(|| per_axis.values().sum::<f64>() / per_axis.len() as f64);
    Ok(F1Scores {
        micro: pooled.f1(),
        macro_,
        per_axis,
    })
}

pub fn invalid_rate<P: Labeled>(pairs: &[P]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(pairs.iter().filter(|p| p.invalid()).count() as f64 / pairs.len() as f64)
}

/// A metric that can be evaluated on any resample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    F1,
    Fpr,
    Fnr,
    Precision,
    Recall,
    ExactMatch,
    HammingLoss,
    MicroF1,
    MacroF1,
    AxisF1(Axis),
    InvalidRate,
}

impl Metric {
    /// The headline row, in table column order.
    pub const HEADLINE: [Metric; 7] = [
        Metric::F1,
        Metric::Fpr,
        Metric::Fnr,
        Metric::ExactMatch,
        Metric::HammingLoss,
        Metric::MicroF1,
        Metric::MacroF1,
    ];

    pub fn name(&self) -> String {
        match self {
            Metric::F1 => "F1".into(),
            Metric::Fpr => "FPR".into(),
            Metric::Fnr => "FNR".into(),
            Metric::Precision => "Precision".into(),
            Metric::Recall => "Recall".into(),
            Metric::ExactMatch => "MR".into(),
            Metric::HammingLoss => "HL".into(),
            Metric::MicroF1 => "F1μ".into(),
            Metric::MacroF1 => "F1M".into(),
            Metric::AxisF1(a) => format!("F1[{}]", a.code()),
            Metric::InvalidRate => "InvalidRate".into(),
        }
    }

    pub fn from_name(name: &str) -> Option<Metric> {
        let simple = [
            Metric::F1,
            Metric::Fpr,
            Metric::Fnr,
            Metric::Precision,
            Metric::Recall,
            Metric::ExactMatch,
            Metric::HammingLoss,
            Metric::MicroF1,
            Metric::MacroF1,
            Metric::InvalidRate,
        ];
        if let Some(m) = simple.into_iter().find(|m| m.name().eq_ignore_ascii_case(name)) {
            return Some(m);
        }
        match name.to_ascii_lowercase().as_str() {
            "f1-micro" | "f1_micro" | "micro-f1" => return Some(Metric::MicroF1),
            "f1-macro" | "f1_macro" | "macro-f1" => return Some(Metric::MacroF1),
            "exact-match" => return Some(Metric::ExactMatch),
            "hamming" => return Some(Metric::HammingLoss),
            _ => {}
        }
        let inner = name.strip_prefix("F1[")?.strip_suffix(']')?;
        inner.parse().ok().map(Metric::AxisF1)
    }

    /// Whether higher values are better.
    pub fn higher_is_better(&self) -> bool {
        !matches!(
            self,
            Metric::Fpr | Metric::Fnr | Metric::HammingLoss | Metric::InvalidRate
        )
    }

    pub fn evaluate<P: Labeled>(&self, pairs: &[P]) -> Option<f64> {
        match self {
            Metric::F1 => binary_confusion(pairs).f1(),
            Metric::Fpr => binary_confusion(pairs).fpr(),
            Metric::Fnr => binary_confusion(pairs).fnr(),
            Metric::Precision => binary_confusion(pairs).precision(),
            Metric::Recall => binary_confusion(pairs).recall(),
            Metric::ExactMatch => exact_match_ratio(pairs).ok(),
            Metric::HammingLoss => hamming_loss(pairs).ok(),
            Metric::MicroF1 => f1_scores(pairs).ok()?.micro,
            Metric::MacroF1 => f1_scores(pairs).ok()?.macro_,
            Metric::AxisF1(a) => axis_confusions(pairs)[a.index()].f1(),
            Metric::InvalidRate => invalid_rate(pairs).ok(),
        }
    }
}

/// A point estimate with an optional confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub point: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n: usize,
    /// Resamples on which the metric was undefined.
    #[serde(default)]
    pub undefined_resamples: usize,
}

impl MetricValue {
    pub fn point_only(name: impl Into<String>, point: f64, n: usize) -> Self {
        Self {
            name: name.into(),
            point,
            ci_low: None,
            ci_high: None,
            n,
            undefined_resamples: 0,
        }
    }

    pub fn half_width(&self) -> Option<f64> {
        Some((self.ci_high? - self.ci_low?) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSettings {
    pub n_resamples: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        Self {
            n_resamples: 1000,
            seed: 0,
            level: 0.95,
        }
    }
}

impl BootstrapSettings {
    fn validate(&self) -> Result<(), MetricsError> {
        if self.n_resamples == 0 {
            return Err(MetricsError::InvalidSettings("n_resamples must be ≥ 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(MetricsError::InvalidSettings(format!(
                "level {} outside (0,1)",
                self.level
            )));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of resample `index` under a run seed.
pub fn resample_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

/// Quantile by linear interpolation between order statistics; `sorted` must be ascending.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Percentile bootstrap of an arbitrary statistic over label pairs.
pub fn bootstrap_with<F>(
    name: &str,
    pairs: &[LabelPair],
    statistic: F,
    settings: &BootstrapSettings,
) -> Result<MetricValue, MetricsError>
where
    F: Fn(&[LabelPair]) -> Option<f64> + Sync,
{
    settings.validate()?;
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let point = statistic(pairs).ok_or_else(|| MetricsError::UndefinedPoint(name.to_string()))?;
    let n = pairs.len();
    let values: Vec<Option<f64>> = (0..settings.n_resamples as u64)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(n),
            |buf, i| {
                let mut rng = ChaCha8Rng::seed_from_u64(resample_seed(settings.seed, i));
                buf.clear();
                buf.extend((0..n).map(|_| pairs[rng.random_range(0..n)]));
                statistic(buf)
            },
        )
        .collect();
    let undefined = values.iter().filter(|v| v.is_none()).count();
    let mut defined: Vec<f64> = values.into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(MetricsError::AllResamplesUndefined(name.to_string()));
    }
    defined.sort_by(f64::total_cmp);
    let tail = (1.0 - settings.level) / 2.0;
    let lo = quantile(&defined, tail);
    let hi = quantile(&defined, 1.0 - tail);
    Ok(MetricValue {
        name: name.to_string(),
        point,
        // the percentile interval need not straddle the point estimate
        ci_low: Some(lo.min(point)),
        ci_high: Some(hi.max(point)),
        n,
        undefined_resamples: undefined,
    })
}

pub fn bootstrap_ci<P: Labeled>(
    pairs: &[P],
    metric: Metric,
    settings: &BootstrapSettings,
) -> Result<MetricValue, MetricsError> {
    let labels: Vec<LabelPair> = pairs
        .iter()
        .map(|p| LabelPair {
            gold: p.gold(),
            pred: p.pred(),
            invalid: p.invalid(),
        })
        .collect();
    bootstrap_with(&metric.name(), &labels, |s| metric.evaluate(s), settings)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub median_ms: f64,
    pub p90_ms: f64,
    pub mean_ms: f64,
    pub n: usize,
    /// Pairs without a latency value.
    pub excluded: usize,
}

pub fn latency_summary(pairs: &[EvalPair]) -> Result<LatencySummary, MetricsError> {
    let mut values: Vec<f64> = pairs.iter().filter_map(|p| p.latency_ms).collect();
    if values.is_empty() {
        return Err(MetricsError::NoLatencyData);
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    };
    Ok(LatencySummary {
        median_ms: median,
        p90_ms: quantile(&values, 0.9),
        mean_ms: values.iter().sum::<f64>() / n as f64,
        n,
        excluded: pairs.len() - n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(axes: &[Axis]) -> LabelSet {
        axes.iter().copied().collect()
    }

    fn bin(gold: &[bool], pred: &[bool]) -> Vec<LabelPair> {
        let to = |b: bool| if b { ls(&[Axis::Gen]) } else { LabelSet::EMPTY };
        gold.iter().zip(pred).map(|(g, p)| LabelPair::new(to(*g), to(*p))).collect()
    }

    #[test]
    fn binary_examples() {
        let m = binary_metrics(&bin(&[true, true, false, false], &[true, false, true, false]));
        assert_eq!(m.confusion, Confusion { tp: 1, fp: 1, fn_: 1, tn: 1 });
        assert_eq!((m.f1, m.fpr, m.fnr), (Some(0.5), Some(0.5), Some(0.5)));

        let m = binary_metrics(&bin(&[true, false], &[true, false]));
        assert_eq!((m.f1, m.fpr, m.fnr), (Some(1.0), Some(0.0), Some(0.0)));

        let m = binary_metrics(&bin(&[true, false, true], &[false, false, false]));
        assert_eq!((m.f1, m.fpr, m.fnr), (Some(0.0), Some(0.0), Some(1.0)));

        let m = binary_metrics(&bin(&[false, false], &[false, false]));
        assert_eq!((m.f1, m.fnr), (None, None));
        assert_eq!(m.fpr, Some(0.0));
    }

    #[test]
    fn binary_reduction_ignores_which_axes() {
        let pairs = vec![
            LabelPair::new(ls(&[Axis::Gen]), ls(&[Axis::Rac])),
            LabelPair::new(ls(&[Axis::So, Axis::Rel]), LabelSet::EMPTY),
        ];
        let m = binary_metrics(&pairs);
        assert_eq!(m.confusion, Confusion { tp: 1, fp: 0, fn_: 1, tn: 0 });
    }

    #[test]
    fn exact_match_examples() {
        let pairs = vec![
            LabelPair::new(ls(&[Axis::Gen]), ls(&[Axis::Gen])),
            LabelPair::new(LabelSet::EMPTY, ls(&[Axis::Rac])),
        ];
        assert_eq!(exact_match_ratio(&pairs), Ok(0.5));
        assert_eq!(exact_match_ratio(&pairs[..1]), Ok(1.0));
        let partial = [LabelPair::new(ls(&[Axis::Gen, Axis::Rac]), ls(&[Axis::Gen]))];
        assert_eq!(exact_match_ratio(&partial), Ok(0.0));
        assert_eq!(exact_match_ratio::<LabelPair>(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn hamming_examples() {
        let pairs = vec![
            LabelPair::new(ls(&[Axis::Gen]), ls(&[Axis::Gen])),
            LabelPair::new(ls(&[Axis::Rac]), ls(&[Axis::Rac, Axis::Age])),
        ];
        assert!((hamming_loss(&pairs).unwrap() - 1.0 / 18.0).abs() < 1e-15);
        assert_eq!(hamming_loss(&pairs[..1]), Ok(0.0));
        let g = ls(&[Axis::Gen, Axis::Phy]);
        assert_eq!(hamming_loss(&[LabelPair::new(g, g.complement())]), Ok(1.0));
        assert_eq!(hamming_loss::<LabelPair>(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn f1_examples() {
        let pairs = vec![
            LabelPair::new(ls(&[Axis::Rel]), ls(&[Axis::Rel])),
            LabelPair::new(LabelSet::EMPTY, LabelSet::EMPTY),
        ];
        let f = f1_scores(&pairs).unwrap();
        assert_eq!(f.micro, Some(1.0));
        assert_eq!(f.macro_, Some(1.0));
        assert_eq!(f.per_axis.len(), 1);
        assert_eq!(f.per_axis[&Axis::Rel], 1.0);

        // GEN perfect on 2, RAC always missed on 2
        let pairs = vec![
            LabelPair::new(ls(&[Axis::Gen]), ls(&[Axis::Gen])),
            LabelPair::new(ls(&[Axis::Gen]), ls(&[Axis::Gen])),
            LabelPair::new(ls(&[Axis::Rac]), LabelSet::EMPTY),
            LabelPair::new(ls(&[Axis::Rac]), LabelSet::EMPTY),
        ];
        let f = f1_scores(&pairs).unwrap();
        assert_eq!(f.macro_, Some(0.5));
        // pooled: TP=2, FN=2 → 4/6
        assert!((f.micro.unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!(!f.per_axis.contains_key(&Axis::So));

        let none = f1_scores(&[LabelPair::default()]).unwrap();
        assert_eq!((none.micro, none.macro_), (None, None));
    }

    #[test]
    fn metric_names_roundtrip() {
        for m in Metric::HEADLINE
            .into_iter()
            .chain([Metric::Precision, Metric::Recall, Metric::InvalidRate, Metric::AxisF1(Axis::Ses)])
        {
            assert_eq!(Metric::from_name(&m.name()), Some(m));
        }
        assert_eq!(Metric::from_name("macro-f1"), Some(Metric::MacroF1));
        assert_eq!(Metric::from_name("bogus"), None);
    }

    #[test]
    fn bootstrap_constant_metric_has_zero_width() {
        let pairs = vec![LabelPair::new(ls(&[Axis::Gen]), ls(&[Axis::Gen])); 20];
        let s = BootstrapSettings { n_resamples: 200, seed: 3, level: 0.95 };
        let v = bootstrap_ci(&pairs, Metric::ExactMatch, &s).unwrap();
        assert_eq!((v.point, v.ci_low, v.ci_high), (1.0, Some(1.0), Some(1.0)));
        assert_eq!(v.half_width(), Some(0.0));
    }

    #[test]
    fn bootstrap_is_deterministic_and_point_is_stable() {
        let pairs: Vec<LabelPair> = (0..60)
            .map(|i| {
                let g = if i % 3 == 0 { LabelSet::EMPTY } else { ls(&[Axis::Age]) };
                let p = if i % 5 == 0 { LabelSet::EMPTY } else { ls(&[Axis::Age]) };
                LabelPair::new(g, p)
            })
            .collect();
        let s = BootstrapSettings { n_resamples: 300, seed: 11, level: 0.9 };
        let a = bootstrap_ci(&pairs, Metric::F1, &s).unwrap();
        let b = bootstrap_ci(&pairs, Metric::F1, &s).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_ci(&pairs, Metric::F1, &BootstrapSettings { n_resamples: 50, seed: 99, ..s }).unwrap();
        assert_eq!(a.point, c.point);
        assert!(a.ci_low.unwrap() <= a.point && a.point <= a.ci_high.unwrap());
    }

    #[test]
    fn bootstrap_error_paths() {
        let s = BootstrapSettings::default();
        let negatives = vec![LabelPair::default(); 5];
        assert_eq!(
            bootstrap_ci(&negatives, Metric::Fnr, &s),
            Err(MetricsError::UndefinedPoint("FNR".into()))
        );
        let zero = BootstrapSettings { n_resamples: 0, ..s };
        assert!(matches!(bootstrap_ci(&negatives, Metric::Fpr, &zero), Err(MetricsError::InvalidSettings(_))));
        let lvl = BootstrapSettings { level: 1.0, ..s };
        assert!(matches!(bootstrap_ci(&negatives, Metric::Fpr, &lvl), Err(MetricsError::InvalidSettings(_))));
        // defined on the sample, undefined on every resample: only reachable via a custom statistic
        let r = bootstrap_with("odd", &negatives, |p| (p.as_ptr() == negatives.as_ptr()).then_some(1.0), &s);
        assert_eq!(r, Err(MetricsError::AllResamplesUndefined("odd".into())));
    }

    fn lat(values: &[Option<f64>]) -> Vec<EvalPair> {
        values
            .iter()
            .enumerate()
            .map(|(i, l)| EvalPair {
                instance_id: i.to_string(),
                dataset: "d".into(),
                gold: LabelSet::EMPTY,
                pred: LabelSet::EMPTY,
                latency_ms: *l,
                invalid: false,
            })
            .collect()
    }

    #[test]
    fn latency_examples() {
        let s = latency_summary(&lat(&[Some(30.0), Some(10.0), Some(20.0)])).unwrap();
        assert_eq!(s.median_ms, 20.0);
        assert_eq!(s.mean_ms, 20.0);
        let s = latency_summary(&lat(&[Some(10.0), Some(20.0), Some(30.0), Some(40.0), None])).unwrap();
        assert_eq!(s.median_ms, 25.0);
        assert_eq!(s.excluded, 1);
        assert!((s.p90_ms - 37.0).abs() < 1e-12);
        assert_eq!(latency_summary(&lat(&[None])), Err(MetricsError::NoLatencyData));
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 5.0);
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.125), 1.5);
    }
}
