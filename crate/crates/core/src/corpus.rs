//! Instance files, split assignment, near-duplicate removal, label statistics
//! and training-derived loss weights.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::VectorStore;
use crate::taxonomy::{is_biased, Axis, LabelSet, RuleSet, TaxonomyError};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: no harmonization rule for label `{label}`")]
    UnmappedLabel { line: usize, label: String },
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
    #[error("no embedding for instance `{0}`")]
    MissingEmbedding(String),
    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),
    #[error("invalid split plan: {0}")]
    InvalidPlan(String),
    #[error("dedup threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Embed(#[from] crate::embedstore::EmbedError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    fn is_unassigned(&self) -> bool {
        *self == Split::Unassigned
    }
}

/// One text record in the canonical schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub text: String,
    #[serde(rename = "dataset")]
    pub source_dataset: String,
    #[serde(rename = "axes")]
    pub gold: LabelSet,
    #[serde(default, skip_serializing_if = "Split::is_unassigned")]
    pub split: Split,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        dataset: impl Into<String>,
        gold: LabelSet,
    ) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            source_dataset: dataset.into(),
            gold,
            split: Split::Unassigned,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    CanonicalJsonl,
    DelimitedTable,
}

impl std::str::FromStr for InputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical-jsonl" | "jsonl" => Ok(InputFormat::CanonicalJsonl),
            "delimited-table" | "csv" | "tsv" => Ok(InputFormat::DelimitedTable),
            other => Err(format!("unknown input format `{other}`")),
        }
    }
}

/// What to do with a record carrying a label no rule maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UnmappedPolicy {
    #[default]
    Skip,
    Abort,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestOptions {
    pub format: InputFormat,
    pub dataset_tag: String,
    #[serde(default)]
    pub on_unmapped: UnmappedPolicy,
    /// Field delimiter for delimited tables.
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Separator between several raw labels inside one table cell.
    #[serde(default = "default_label_separator")]
    pub label_separator: char,
}

fn default_delimiter() -> char {
    ','
}
fn default_label_separator() -> char {
    ';'
}

impl IngestOptions {
    pub fn new(format: InputFormat, dataset_tag: impl Into<String>) -> Self {
        Self {
            format,
            dataset_tag: dataset_tag.into(),
            on_unmapped: UnmappedPolicy::Skip,
            delimiter: default_delimiter(),
            label_separator: default_label_separator(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedRecord {
    pub line: usize,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOutcome {
    pub instances: Vec<Instance>,
    pub skipped: Vec<SkippedRecord>,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: Option<String>,
    text: String,
    dataset: Option<String>,
    #[serde(default)]
    axes: Vec<String>,
    #[serde(default)]
    split: Split,
}

enum LabelResolution {
    Labels(LabelSet),
    Skip(String),
}

/// Axis codes pass through directly; anything else goes through the rules.
fn resolve_labels(
    raw: &[String],
    rules: &RuleSet,
    policy: UnmappedPolicy,
    line: usize,
) -> Result<LabelResolution, CorpusError> {
    let mut labels = LabelSet::EMPTY;
    for label in raw.iter().map(|l| l.trim()).filter(|l| !l.is_empty()) {
        if let Ok(axis) = label.parse::<Axis>() {
            labels.insert(axis);
            continue;
        }
        match rules.harmonize(label) {
            Ok(set) => labels = labels.union(set),
            Err(TaxonomyError::ExcludedLabel(l)) => {
                return Ok(LabelResolution::Skip(format!("label `{l}` is outside the taxonomy")))
            }
            Err(_) => match policy {
                UnmappedPolicy::Skip => {
                    return Ok(LabelResolution::Skip(format!("unmapped label `{label}`")))
                }
                UnmappedPolicy::Abort => {
                    return Err(CorpusError::UnmappedLabel {
                        line,
                        label: label.to_string(),
                    })
                }
            },
        }
    }
    Ok(LabelResolution::Labels(labels))
}

struct Builder<'a> {
    options: &'a IngestOptions,
    rules: &'a RuleSet,
    seen: HashSet<String>,
    out: IngestOutcome,
}

impl Builder<'_> {
    fn push(&mut self, line: usize, row_index: usize, record: RawRecord) -> Result<(), CorpusError> {
        let id = record
            .id
            .filter(|s| !s.trim().is_empty())
            .unwrap_or_else(|| format!("{}/{}", self.options.dataset_tag, row_index));
        if record.text.trim().is_empty() {
            return Err(CorpusError::Parse {
                line,
                message: "empty text".into(),
            });
        }
        let dataset = record
            .dataset
            .filter(|s| !s.trim().is_empty())
            .unwrap_or_else(|| self.options.dataset_tag.clone());
        if dataset.trim().is_empty() {
            return Err(CorpusError::Parse {
                line,
                message: "empty dataset tag".into(),
            });
        }
        match resolve_labels(&record.axes, self.rules, self.options.on_unmapped, line)? {
            LabelResolution::Skip(reason) => {
                tracing::info!(line, %id, %reason, "skipping record");
                self.out.skipped.push(SkippedRecord { line, id, reason });
            }
            LabelResolution::Labels(gold) => {
                if !self.seen.insert(id.clone()) {
                    return Err(CorpusError::DuplicateId(id));
                }
                self.out.instances.push(Instance {
                    id,
                    text: record.text,
                    source_dataset: dataset,
                    gold,
                    split: record.split,
                });
            }
        }
        Ok(())
    }
}

/// Reads canonical JSON lines or a delimited table into harmonized instances.
pub fn ingest_reader(
    reader: impl BufRead,
    options: &IngestOptions,
    rules: &RuleSet,
) -> Result<IngestOutcome, CorpusError> {
    let mut b = Builder {
        options,
        rules,
        seen: HashSet::new(),
        out: IngestOutcome::default(),
    };
    match options.format {
        InputFormat::CanonicalJsonl => {
            let mut row = 0;
            for (i, line) in reader.lines().enumerate() {
                let line_no = i + 1;
                let line = line.map_err(|e| CorpusError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: RawRecord =
                    serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                        line: line_no,
                        message: e.to_string(),
                    })?;
                b.push(line_no, row, record)?;
                row += 1;
            }
        }
        InputFormat::DelimitedTable => {
            let mut rdr = csv::ReaderBuilder::new()
                .delimiter(options.delimiter as u8)
                .flexible(false)
                .from_reader(reader);
            let headers = rdr
                .headers()
                .map_err(|e| CorpusError::Parse {
                    line: 1,
                    message: e.to_string(),
                })?
                .clone();
            let col = |names: &[&str]| {
                headers
                    .iter()
                    .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
            };
            let text_col = col(&["text"]).ok_or_else(|| CorpusError::Parse {
                line: 1,
                message: "missing `text` column".into(),
            })?;
            let id_col = col(&["id"]);
            let dataset_col = col(&["dataset"]);
            let label_col = col(&["axes", "labels", "label"]);
            let split_col = col(&["split"]);
            for (row, result) in rdr.records().enumerate() {
                let line_no = row + 2;
                let rec = result.map_err(|e| CorpusError::Parse {
                    line: e.position().map(|p| p.line() as usize).unwrap_or(line_no),
                    message: e.to_string(),
                })?;
                let field = |c: Option<usize>| c.and_then(|c| rec.get(c)).map(str::to_string);
                let split = match field(split_col).as_deref().map(str::trim) {
                    None | Some("") => Split::Unassigned,
                    Some(s) => serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
                        .map_err(|_| CorpusError::Parse {
                            line: line_no,
                            message: format!("unknown split `{s}`"),
                        })?,
                };
                let axes = field(label_col)
                    .map(|cell| {
                        cell.split(options.label_separator)
                            .map(str::to_string)
                            .collect()
                    })
                    .unwrap_or_default();
                let record = RawRecord {
                    id: field(id_col),
                    text: rec.get(text_col).unwrap_or_default().to_string(),
                    dataset: field(dataset_col),
                    axes,
                    split,
                };
                b.push(line_no, row, record)?;
            }
        }
    }
    Ok(b.out)
}

pub fn ingest(path: &Path, options: &IngestOptions, rules: &RuleSet) -> Result<IngestOutcome, CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    ingest_reader(std::io::BufReader::new(file), options, rules)
}

/// Reads a canonical instance file whose `axes` are already axis codes.
pub fn read_instances(path: &Path) -> Result<Vec<Instance>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(inst.id.clone()) {
            return Err(CorpusError::DuplicateId(inst.id));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn write_instances(path: &Path, instances: &[Instance]) -> Result<(), CorpusError> {
    write_jsonl(path, instances)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CorpusError> {
    let file = std::fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row).expect("serializable row");
        w.write_all(b"\n").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_fraction: f64,
    pub dev_fraction_of_train: f64,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            train_fraction: 0.53,
            dev_fraction_of_train: 0.10,
            seed: 0,
        }
    }
}

impl SplitPlan {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CorpusError::InvalidPlan(format!(
                "train_fraction {} outside (0,1)",
                self.train_fraction
            )));
        }
        if !(self.dev_fraction_of_train >= 0.0 && self.dev_fraction_of_train < 1.0) {
            return Err(CorpusError::InvalidPlan(format!(
                "dev_fraction {} outside [0,1)",
                self.dev_fraction_of_train
            )));
        }
        Ok(())
    }
}

// Products like 0.29 * 100 land a hair under the integer.
fn floor_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Shuffles under `plan.seed`, then cuts train-pool / test, then dev out of the pool.
/// Any existing split on the input is overwritten.
pub fn assign_splits(mut instances: Vec<Instance>, plan: &SplitPlan) -> Result<Vec<Instance>, CorpusError> {
    plan.validate()?;
    let n = instances.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    order.shuffle(&mut rng);
    let pool = floor_count(plan.train_fraction, n);
    let dev = floor_count(plan.dev_fraction_of_train, pool);
    for (rank, &idx) in order.iter().enumerate() {
        instances[idx].split = if rank < dev {
            Split::Dev
        } else if rank < pool {
            Split::Train
        } else {
            Split::Test
        };
    }
    Ok(instances)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupRemoval {
    pub test_id: String,
    pub train_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DedupOutcome {
    pub kept: Vec<Instance>,
    pub removed: Vec<DedupRemoval>,
}

/// Drops test instances whose best cosine match in `reference` reaches `threshold`.
pub fn dedup_test_against_train(
    test: &[Instance],
    reference: &[Instance],
    vectors: &VectorStore,
    threshold: f64,
) -> Result<DedupOutcome, CorpusError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(CorpusError::InvalidThreshold(threshold));
    }
    let lookup = |inst: &Instance| {
        vectors
            .get(&inst.id)
            .ok_or_else(|| CorpusError::MissingEmbedding(inst.id.clone()))
    };
    let refs = reference
        .iter()
        .map(|r| Ok((r.id.as_str(), lookup(r)?)))
        .collect::<Result<Vec<_>, CorpusError>>()?;
    let queries = test.iter().map(lookup).collect::<Result<Vec<_>, CorpusError>>()?;

    let best: Vec<Option<(&str, f64)>> = queries
        .par_iter()
        .map(|q| {
            let mut best: Option<(&str, f64)> = None;
            for (id, r) in &refs {
                let score = q.cosine(r)?;
                let better = match best {
                    None => true,
                    Some((bid, bs)) => score > bs || (score == bs && *id < bid),
                };
                if better {
                    best = Some((id, score));
                }
            }
            Ok(best)
        })
        .collect::<Result<_, CorpusError>>()?;

    let mut out = DedupOutcome::default();
    for (inst, best) in test.iter().zip(best) {
        match best {
            Some((train_id, score)) if score >= threshold => out.removed.push(DedupRemoval {
                test_id: inst.id.clone(),
                train_id: train_id.to_string(),
                score,
            }),
            _ => out.kept.push(inst.clone()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_total: usize,
    pub n_biased: usize,
    pub n_unbiased: usize,
    pub per_axis_counts: BTreeMap<Axis, usize>,
    /// Row/column order follows [`Axis::ALL`].
    pub cooccurrence: [[usize; 9]; 9],
    pub labels_per_instance_histogram: BTreeMap<usize, usize>,
}

pub fn compute_stats(instances: &[Instance]) -> CorpusStats {
    let mut stats = CorpusStats {
        n_total: instances.len(),
        n_biased: 0,
        n_unbiased: 0,
        per_axis_counts: Axis::ALL.iter().map(|a| (*a, 0)).collect(),
        cooccurrence: [[0; 9]; 9],
        labels_per_instance_histogram: BTreeMap::new(),
    };
    for inst in instances {
        if is_biased(inst.gold) {
            stats.n_biased += 1;
        } else {
            stats.n_unbiased += 1;
        }
        *stats
            .labels_per_instance_histogram
            .entry(inst.gold.len())
            .or_default() += 1;
        for a in inst.gold.axes() {
            *stats.per_axis_counts.get_mut(&a).expect("all axes present") += 1;
            for b in inst.gold.axes() {
                stats.cooccurrence[a.index()][b.index()] += 1;
            }
        }
    }
    stats
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightProvenance {
    pub n_train: usize,
    pub n_biased: usize,
    pub n_unbiased: usize,
    pub positives: BTreeMap<Axis, usize>,
}

/// Per-axis positive weights and per-instance binary weights for the
/// reweighted multi-label loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub alpha: BTreeMap<Axis, f64>,
    pub w_biased: f64,
    pub w_unbiased: f64,
    /// Axes with no training positives; their alpha falls back to 1.
    pub flagged_axes: Vec<Axis>,
    pub provenance: WeightProvenance,
}

impl WeightTable {
    pub fn instance_weight(&self, gold: LabelSet) -> f64 {
        if is_biased(gold) {
            self.w_biased
        } else {
            self.w_unbiased
        }
    }
}

pub fn compute_weights(train: &[Instance]) -> Result<WeightTable, CorpusError> {
    if train.is_empty() {
        return Err(CorpusError::DegenerateCorpus("empty training set".into()));
    }
    let stats = compute_stats(train);
    let n = stats.n_total as f64;
    if stats.n_biased == 0 || stats.n_unbiased == 0 {
        return Err(CorpusError::DegenerateCorpus(format!(
            "{} biased / {} unbiased training instances",
            stats.n_biased, stats.n_unbiased
        )));
    }
    let mut flagged = Vec::new();
    let alpha = stats
        .per_axis_counts
        .iter()
        .map(|(&axis, &pos)| {
            let a = if pos == 0 {
                flagged.push(axis);
                1.0
            } else {
                (n - pos as f64) / pos as f64
            };
            (axis, a)
        })
        .collect();
    Ok(WeightTable {
        alpha,
        w_biased: n / (2.0 * stats.n_biased as f64),
        w_unbiased: n / (2.0 * stats.n_unbiased as f64),
        flagged_axes: flagged,
        provenance: WeightProvenance {
            n_train: stats.n_total,
            n_biased: stats.n_biased,
            n_unbiased: stats.n_unbiased,
            positives: stats.per_axis_counts,
        },
    })
}
