//! Synthetic corpora and noisy detectors with known error rates.
//!
//! Draws are keyed by `(seed, instance id)` rather than by position, so a
//! detector answers identically regardless of the order it sees instances.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::{Instance, Split};
use crate::metrics::{resample_seed, EvalPair, LabelPair};
use crate::taxonomy::{Axis, LabelSet};

/// Number of instances per gold label set.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub groups: Vec<(LabelSet, usize)>,
    pub dataset: String,
}

impl CorpusSpec {
    /// `n` instances for each single axis plus `n_unbiased` unbiased ones.
    pub fn per_axis(axes: &[Axis], n: usize, n_unbiased: usize) -> Self {
        let mut groups: Vec<(LabelSet, usize)> = axes.iter().map(|a| (LabelSet::single(*a), n)).collect();
        if n_unbiased > 0 {
            groups.push((LabelSet::EMPTY, n_unbiased));
        }
        Self {
            groups,
            dataset: "synthetic".into(),
        }
    }

    /// Instances with ids `{dataset}-{group}-{i}`, all in the test split.
    pub fn generate(&self) -> Vec<Instance> {
        let mut out = Vec::new();
        for (labels, n) in &self.groups {
            let tag = labels.to_string().replace(',', "+").to_lowercase();
            for i in 0..*n {
                let id = format!("{}-{tag}-{i:05}", self.dataset);
                let text = format!("synthetic {tag} statement number {i}");
                out.push(Instance::new(id, text, self.dataset.clone(), *labels).with_split(Split::Test));
            }
        }
        out
    }
}

/// Uniform draw in `[0, 1)` determined by `(seed, key, stream)`.
pub fn keyed_unit(seed: u64, key: &str, stream: u64) -> f64 {
    let digest = Sha256::digest(key.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(resample_seed(seed ^ stream.rotate_left(32), u64::from_le_bytes(b)));
    rng.random::<f64>()
}

/// A detector that misses biased instances at a rate depending on their
/// gold set and flags unbiased ones at a fixed rate.
///
/// A miss predicts the empty set. A false positive predicts one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDetector {
    /// Miss rate for instances whose gold set equals the key.
    pub fnr_by_gold: BTreeMap<LabelSet, f64>,
    /// Miss rate for any other biased instance.
    pub default_fnr: f64,
    /// Rate at which unbiased instances are flagged.
    pub fpr: f64,
    /// Axis predicted on a false positive.
    pub false_positive_axis: Axis,
    pub seed: u64,
}

impl NoisyDetector {
    pub fn new(default_fnr: f64, fpr: f64, seed: u64) -> Self {
        Self {
            fnr_by_gold: BTreeMap::new(),
            default_fnr,
            fpr,
            false_positive_axis: Axis::Gen,
            seed,
        }
    }

    pub fn with_fnr(mut self, gold: LabelSet, fnr: f64) -> Self {
        self.fnr_by_gold.insert(gold, fnr);
        self
    }

    pub fn predict(&self, id: &str, gold: LabelSet) -> LabelSet {
        let u = keyed_unit(self.seed, id, 0);
        if gold.is_empty() {
            if u < self.fpr {
                LabelSet::single(self.false_positive_axis)
            } else {
                LabelSet::EMPTY
            }
        } else {
            let fnr = self.fnr_by_gold.get(&gold).copied().unwrap_or(self.default_fnr);
            if u < fnr {
                LabelSet::EMPTY
            } else {
                gold
            }
        }
    }

    pub fn label_pairs(&self, instances: &[Instance]) -> Vec<LabelPair> {
        instances
            .iter()
            .map(|i| LabelPair::new(i.gold, self.predict(&i.id, i.gold)))
            .collect()
    }

    pub fn eval_pairs(&self, instances: &[Instance]) -> Vec<EvalPair> {
        instances
            .iter()
            .map(|i| EvalPair {
                instance_id: i.id.clone(),
                dataset: i.source_dataset.clone(),
                gold: i.gold,
                pred: self.predict(&i.id, i.gold),
                latency_ms: None,
                invalid: false,
            })
            .collect()
    }
}
