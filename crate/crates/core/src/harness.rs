//! Audit runs: configuration, the ingest → split → dedup → detect → score
//! pipeline, and report rendering.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    self, assign_splits, dedup_test_against_train, CorpusError, DedupRemoval, IngestOptions, InputFormat, Instance,
    Split, SplitPlan, UnmappedPolicy,
};
use crate::disparity::{
    default_pair_groups, disparity_report, DisparityError, DisparityOptions, DisparityReport, FnRule, FprBase,
    RateKind,
};
use crate::embedstore::{EmbedError, Embedder, EmbeddingServiceConfig, HttpEmbeddingBackend, VectorStore};
use crate::metrics::{
    bootstrap_ci, latency_summary, BootstrapSettings, EvalPair, LatencySummary, Metric, MetricValue, MetricsError,
};
use crate::promptdetect::{
    build_prompt, read_partial_predictions, read_predictions, select_examples, write_prediction_line, DetectError,
    Detector, DetectorConfig, DetectorTag, FewShotSpec, HttpChatBackend, PolicyDocument, PoolSelector, Prediction,
    PromptOptions, Strategy,
};
use crate::taxonomy::{Axis, RuleSet};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Corpus {
        stage: &'static str,
        #[source]
        source: CorpusError,
    },
    #[error("{stage}: {source}")]
    Embed {
        stage: &'static str,
        #[source]
        source: EmbedError,
    },
    #[error("detector `{detector}`: {source}")]
    Detect {
        detector: String,
        #[source]
        source: DetectError,
    },
    #[error("missing predictions for {} instance(s): {}", .0.len(), list_ids(.0))]
    MissingPrediction(Vec<String>),
    #[error("duplicate predictions for {} instance(s): {}", .0.len(), list_ids(.0))]
    DuplicatePrediction(Vec<String>),
    #[error("scoring {context}: {source}")]
    Metrics {
        context: String,
        #[source]
        source: MetricsError,
    },
    #[error(transparent)]
    Disparity(#[from] DisparityError),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn list_ids(ids: &[String]) -> String {
    const SHOWN: usize = 20;
    let mut s = ids.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        let _ = write!(s, ", … ({} more)", ids.len() - SHOWN);
    }
    s
}

impl HarnessError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for invalid configuration, 2 for an unreachable backend, 3 for bad data.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Corpus {
                source: CorpusError::InvalidPlan(_) | CorpusError::InvalidThreshold(_),
                ..
            } => 1,
            HarnessError::Corpus {
                source: CorpusError::Embed(EmbedError::BackendUnavailable(_)),
                ..
            } => 2,
            HarnessError::Embed {
                source: EmbedError::BackendUnavailable(_),
                ..
            } => 2,
            HarnessError::Detect { source, .. } => match source {
                DetectError::BackendUnavailable(_) | DetectError::Timeout => 2,
                DetectError::InvalidSpec(_) | DetectError::Policy(_) => 1,
                DetectError::Embed(EmbedError::BackendUnavailable(_)) => 2,
                _ => 3,
            },
            HarnessError::Metrics {
                source: MetricsError::InvalidSettings(_),
                ..
            } => 1,
            HarnessError::Disparity(DisparityError::InvalidGroup(_)) => 1,
            _ => 3,
        }
    }
}

type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Seeds for every random stage. Stages without their own seed use `base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedBlock {
    #[serde(default)]
    pub base: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fewshot: Option<u64>,
}

/// Seeds actually used by a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedSeeds {
    pub split: u64,
    pub bootstrap: u64,
    pub fewshot: u64,
}

impl SeedBlock {
    pub fn resolve(&self) -> ResolvedSeeds {
        ResolvedSeeds {
            split: self.split.unwrap_or(self.base),
            bootstrap: self.bootstrap.unwrap_or(self.base),
            fewshot: self.fewshot.unwrap_or(self.base),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: InputFormat,
    pub dataset: String,
    #[serde(default)]
    pub on_unmapped: UnmappedPolicy,
    /// Harmonization rules file; the bundled rules when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delimiter: Option<char>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_separator: Option<char>,
}

fn default_format() -> InputFormat {
    InputFormat::CanonicalJsonl
}

impl CorpusSource {
    pub fn ingest_options(&self) -> IngestOptions {
        let mut o = IngestOptions::new(self.format, self.dataset.clone());
        o.on_unmapped = self.on_unmapped;
        if let Some(d) = self.delimiter {
            o.delimiter = d;
        }
        if let Some(s) = self.label_separator {
            o.label_separator = s;
        }
        o
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSettings {
    /// When false, the splits recorded in the corpus files are kept.
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction_of_train: f64,
}

fn yes() -> bool {
    true
}
fn default_train_fraction() -> f64 {
    SplitPlan::default().train_fraction
}
fn default_dev_fraction() -> f64 {
    SplitPlan::default().dev_fraction_of_train
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            train_fraction: default_train_fraction(),
            dev_fraction_of_train: default_dev_fraction(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DedupSettings {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.9
}

impl Default for DedupSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            threshold: default_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSettings {
    pub service: EmbeddingServiceConfig,
    /// Vector cache; `<output>/embeddings.bavs` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

/// HTTP client settings of a live detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSettings {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "one")]
    pub top_p: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra_body: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_pointer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

fn one() -> f64 {
    1.0
}
fn default_retries() -> u32 {
    3
}
fn default_timeout() -> u64 {
    60_000
}
fn default_inflight() -> usize {
    4
}
fn default_backoff() -> u64 {
    250
}

impl Default for ClientSettings {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_retries: default_retries(),
            timeout_ms: default_timeout(),
            max_inflight: default_inflight(),
            backoff_base_ms: default_backoff(),
            extra_body: Default::default(),
            response_pointer: None,
            api_key_env: None,
        }
    }
}

/// One detector of a run: either a live chat endpoint or a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorEntry {
    /// Report key; also names the persisted prediction file.
    pub name: String,
    #[serde(default)]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Precomputed predictions, scored instead of querying an endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_file: Option<PathBuf>,
    #[serde(default)]
    pub shots: usize,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub pool: PoolSelector,
    #[serde(default)]
    pub prompt: PromptOptions,
    #[serde(default)]
    pub client: ClientSettings,
}

impl DetectorEntry {
    pub fn fewshot(&self, seed: u64) -> FewShotSpec {
        FewShotSpec {
            strategy: if self.shots == 0 { Strategy::None } else { self.strategy },
            k: self.shots,
            seed,
            pool: self.pool,
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        let c = &self.client;
        let mut cfg = DetectorConfig::new(self.endpoint.clone().unwrap_or_default(), self.model.clone());
        cfg.temperature = c.temperature;
        cfg.top_p = c.top_p;
        cfg.max_retries = c.max_retries;
        cfg.timeout_ms = c.timeout_ms;
        cfg.max_inflight = c.max_inflight;
        cfg.backoff_base_ms = c.backoff_base_ms;
        cfg.extra_body = c.extra_body.clone();
        if let Some(p) = &c.response_pointer {
            cfg.response_pointer = p.clone();
        }
        cfg.api_key_env = c.api_key_env.clone();
        cfg
    }

    fn is_live(&self) -> bool {
        self.endpoint.as_deref().is_some_and(|e| !e.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapBlock {
    #[serde(default = "default_resamples")]
    pub n_resamples: usize,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_resamples() -> usize {
    1000
}
fn default_level() -> f64 {
    0.95
}

impl Default for BootstrapBlock {
    fn default() -> Self {
        Self {
            n_resamples: default_resamples(),
            level: default_level(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisparitySettings {
    #[serde(default = "default_pairs")]
    pub pairs: Vec<[Axis; 2]>,
    #[serde(default)]
    pub fpr_base: FprBase,
    #[serde(default)]
    pub fn_rule: FnRule,
}

fn default_pairs() -> Vec<[Axis; 2]> {
    default_pair_groups().into_iter().map(|(a, b)| [a, b]).collect()
}

impl Default for DisparitySettings {
    fn default() -> Self {
        Self {
            pairs: default_pairs(),
            fpr_base: FprBase::default(),
            fn_rule: FnRule::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[serde(alias = "machine-readable")]
    Json,
    #[serde(alias = "markdown-table")]
    Markdown,
    #[serde(alias = "delimited-table")]
    Csv,
}

impl ReportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Json => "report.json",
            ReportFormat::Markdown => "report.md",
            ReportFormat::Csv => "report.csv",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" | "machine-readable" => Ok(ReportFormat::Json),
            "markdown" | "md" | "markdown-table" => Ok(ReportFormat::Markdown),
            "csv" | "delimited-table" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSettings {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "all_formats")]
    pub formats: Vec<ReportFormat>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("audit-out")
}
fn all_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Json, ReportFormat::Markdown, ReportFormat::Csv]
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            formats: all_formats(),
        }
    }
}

/// A complete audit run, read from one TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: SeedBlock,
    #[serde(default, rename = "corpus")]
    pub corpora: Vec<CorpusSource>,
    #[serde(default)]
    pub split: SplitSettings,
    #[serde(default)]
    pub dedup: DedupSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingSettings>,
    #[serde(default, rename = "detector")]
    pub detectors: Vec<DetectorEntry>,
    /// Metric names; the headline table columns when empty.
    #[serde(default)]
    pub metrics: Vec<String>,
    #[serde(default)]
    pub bootstrap: BootstrapBlock,
    #[serde(default)]
    pub disparity: DisparitySettings,
    #[serde(default)]
    pub output: OutputSettings,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir)
    }

    pub fn seeds(&self) -> ResolvedSeeds {
        self.seed.resolve()
    }

    pub fn bootstrap_settings(&self) -> BootstrapSettings {
        BootstrapSettings {
            n_resamples: self.bootstrap.n_resamples,
            seed: self.seeds().bootstrap,
            level: self.bootstrap.level,
        }
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            train_fraction: self.split.train_fraction,
            dev_fraction_of_train: self.split.dev_fraction_of_train,
            seed: self.seeds().split,
        }
    }

    pub fn metric_list(&self) -> Result<Vec<Metric>> {
        if self.metrics.is_empty() {
            return Ok(Metric::HEADLINE.to_vec());
        }
        self.metrics
            .iter()
            .map(|n| Metric::from_name(n).ok_or_else(|| HarnessError::Config(format!("unknown metric `{n}`"))))
            .collect()
    }

    pub fn score_options(&self) -> Result<ScoreOptions> {
        Ok(ScoreOptions {
            metrics: self.metric_list()?,
            bootstrap: self.bootstrap_settings(),
            disparity: DisparityOptions {
                fpr_base: self.disparity.fpr_base,
                fn_rule: self.disparity.fn_rule,
            },
            pair_groups: self.disparity.pairs.iter().map(|[a, b]| (*a, *b)).collect(),
        })
    }

    /// Checks everything that can be checked without running the pipeline.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.corpora.is_empty() {
            return fail("no [[corpus]] entries".into());
        }
        for c in &self.corpora {
            let p = self.resolve(&c.path);
            if !p.is_file() {
                return fail(format!("corpus file {} does not exist", p.display()));
            }
            if let Some(r) = &c.rules {
                if !self.resolve(r).is_file() {
                    return fail(format!("rules file {} does not exist", r.display()));
                }
            }
        }
        if self.split.enabled {
            self.split_plan()
                .validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if self.dedup.enabled {
            if !(self.dedup.threshold > 0.0 && self.dedup.threshold <= 1.0) {
                return fail(format!("dedup threshold {} outside (0,1]", self.dedup.threshold));
            }
            if self.embedding.is_none() {
                return fail("dedup needs an [embedding] service".into());
            }
        }
        if self.detectors.is_empty() {
            return fail("no [[detector]] entries".into());
        }
        let mut names = HashSet::new();
        for d in &self.detectors {
            if d.name.is_empty() || d.name.contains(['/', '\\']) {
                return fail(format!("detector name `{}` must be non-empty and contain no path separators", d.name));
            }
            if !names.insert(d.name.as_str()) {
                return fail(format!("duplicate detector name `{}`", d.name));
            }
            match (&d.predictions, d.is_live()) {
                (None, false) => return fail(format!("detector `{}` needs an endpoint or a predictions file", d.name)),
                (Some(_), true) => {
                    return fail(format!("detector `{}` has both an endpoint and a predictions file", d.name))
                }
                (Some(p), false) => {
                    if !self.resolve(p).is_file() {
                        return fail(format!("predictions file {} does not exist", p.display()));
                    }
                }
                (None, true) => {
                    if d.model.is_empty() {
                        return fail(format!("detector `{}` has no model", d.name));
                    }
                    if let Some(p) = &d.policy_file {
                        if !self.resolve(p).is_file() {
                            return fail(format!("policy file {} does not exist", p.display()));
                        }
                    }
                    if d.shots > 0 && d.strategy == Strategy::None {
                        return fail(format!("detector `{}`: {} shots need a strategy", d.name, d.shots));
                    }
                    if d.shots > 0 && d.strategy == Strategy::Rag && self.embedding.is_none() {
                        return fail(format!("detector `{}`: rag needs an [embedding] service", d.name));
                    }
                    if d.client.max_inflight == 0 {
                        return fail(format!("detector `{}`: max_inflight must be ≥ 1", d.name));
                    }
                }
            }
        }
        for [a, b] in &self.disparity.pairs {
            if a == b {
                return fail(format!("disparity pair [{a}, {b}] repeats an axis"));
            }
        }
        if self.bootstrap.n_resamples == 0 || !(self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0) {
            return fail("bootstrap needs n_resamples ≥ 1 and level in (0,1)".into());
        }
        self.metric_list()?;
        Ok(())
    }
}

/// Instances after ingest, split and dedup.
#[derive(Debug, Clone, Default)]
pub struct PreparedCorpus {
    pub instances: Vec<Instance>,
    pub skipped: usize,
    pub dedup_removed: Vec<DedupRemoval>,
    /// Vectors of every instance, when an embedding service is configured.
    pub vectors: Option<VectorStore>,
}

/// Instances scored by a run: the test split, or everything when no
/// instance is marked test.
pub fn evaluation_set(instances: &[Instance]) -> Vec<Instance> {
    let test: Vec<Instance> = instances.iter().filter(|i| i.split == Split::Test).cloned().collect();
    if test.is_empty() {
        instances.to_vec()
    } else {
        test
    }
}

pub fn pool_for(instances: &[Instance], selector: PoolSelector) -> Vec<Instance> {
    instances
        .iter()
        .filter(|i| match selector {
            PoolSelector::TrainDev => matches!(i.split, Split::Train | Split::Dev),
            PoolSelector::Train => i.split == Split::Train,
            PoolSelector::Dev => i.split == Split::Dev,
        })
        .cloned()
        .collect()
}

pub fn ingest_sources(config: &RunConfig) -> Result<(Vec<Instance>, usize)> {
    let mut instances = Vec::new();
    let mut skipped = 0;
    let mut seen = HashSet::new();
    for source in &config.corpora {
        let rules = match &source.rules {
            Some(p) => RuleSet::load(&config.resolve(p)).map_err(|e| HarnessError::Config(e.to_string()))?,
            None => RuleSet::builtin(),
        };
        let path = config.resolve(&source.path);
        let outcome = corpus::ingest(&path, &source.ingest_options(), &rules)
            .map_err(|source| HarnessError::Corpus { stage: "ingest", source })?;
        for s in &outcome.skipped {
            tracing::warn!(file = %path.display(), line = s.line, id = %s.id, "skipped: {}", s.reason);
        }
        skipped += outcome.skipped.len();
        for inst in outcome.instances {
            if !seen.insert(inst.id.clone()) {
                return Err(HarnessError::Corpus {
                    stage: "ingest",
                    source: CorpusError::DuplicateId(inst.id),
                });
            }
            instances.push(inst);
        }
    }
    Ok((instances, skipped))
}

/// Embeds `instances` through the configured service, reusing and
/// updating the on-disk cache.
pub async fn embed_instances(config: &RunConfig, instances: &[Instance]) -> Result<VectorStore> {
    let settings = config
        .embedding
        .as_ref()
        .ok_or_else(|| HarnessError::Config("no [embedding] service configured".into()))?;
    let embed_err = |source| HarnessError::Embed { stage: "embed", source };
    let backend = HttpEmbeddingBackend::new(settings.service.clone())
        .map_err(|e| embed_err(EmbedError::BackendUnavailable(e)))?;
    let mut embedder = Embedder::new(backend, settings.service.batch_size, settings.service.max_inflight);
    let cache_path = match &settings.cache {
        Some(p) => config.resolve(p),
        None => config.out_dir().join("embeddings.bavs"),
    };
    if cache_path.is_file() {
        let cache = VectorStore::load(&cache_path).map_err(embed_err)?;
        embedder = embedder.with_cache(cache).map_err(embed_err)?;
    }
    let texts: Vec<(String, String)> = instances.iter().map(|i| (i.id.clone(), i.text.clone())).collect();
    let result = embedder.embed_store(&texts).await;
    if let Some(parent) = cache_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    // keep whatever was fetched, even when a later batch failed
    embedder.cache().save(&cache_path).map_err(embed_err)?;
    result.map_err(embed_err)
}

/// Ingest, split and (optionally) dedup.
pub async fn prepare_corpus(config: &RunConfig) -> Result<PreparedCorpus> {
    let (mut instances, skipped) = ingest_sources(config)?;
    if config.split.enabled {
        instances = assign_splits(instances, &config.split_plan())
            .map_err(|source| HarnessError::Corpus { stage: "split", source })?;
    }
    let needs_vectors = config.dedup.enabled
        || config
            .detectors
            .iter()
            .any(|d| d.is_live() && d.shots > 0 && d.strategy == Strategy::Rag);
    let vectors = if needs_vectors {
        Some(embed_instances(config, &instances).await?)
    } else {
        None
    };
    let mut dedup_removed = Vec::new();
    if config.dedup.enabled {
        let vectors = vectors.as_ref().expect("embedded above");
        let (test, reference): (Vec<Instance>, Vec<Instance>) =
            instances.iter().cloned().partition(|i| i.split == Split::Test);
        let reference: Vec<Instance> = reference.into_iter().filter(|i| i.split != Split::Unassigned).collect();
        let outcome = dedup_test_against_train(&test, &reference, vectors, config.dedup.threshold)
            .map_err(|source| HarnessError::Corpus { stage: "dedup", source })?;
        let removed: HashSet<&str> = outcome.removed.iter().map(|r| r.test_id.as_str()).collect();
        instances.retain(|i| !removed.contains(i.id.as_str()));
        dedup_removed = outcome.removed;
    }
    Ok(PreparedCorpus {
        instances,
        skipped,
        dedup_removed,
        vectors,
    })
}

/// Predictions keyed by id, with the state a resumed run needs.
fn load_cached(path: &Path, wanted: &HashSet<&str>, tag: &DetectorTag) -> Result<HashMap<String, Prediction>> {
    if !path.is_file() {
        return Ok(HashMap::new());
    }
    let cached = read_partial_predictions(path).map_err(|source| HarnessError::Detect {
        detector: tag.model.clone(),
        source,
    })?;
    let mut out = HashMap::new();
    for p in cached {
        if &p.detector != tag {
            return Err(HarnessError::Config(format!(
                "{} holds predictions from a different detector setup ({} {:?} {}-shot); remove it to rerun",
                path.display(),
                p.detector.model,
                p.detector.strategy,
                p.detector.shots
            )));
        }
        if wanted.contains(p.instance_id.as_str()) {
            out.entry(p.instance_id.clone()).or_insert(p);
        }
    }
    Ok(out)
}

/// Queries a live detector for every instance of `eval`, resuming from
/// the predictions already stored at `path`. Returns predictions in
/// `eval` order; `path` ends up holding exactly those.
pub async fn run_detector(
    entry: &DetectorEntry,
    fewshot: &FewShotSpec,
    corpus: &PreparedCorpus,
    eval: &[Instance],
    path: &Path,
) -> Result<Vec<Prediction>> {
    let detect_err = |source| HarnessError::Detect {
        detector: entry.name.clone(),
        source,
    };
    fewshot.validate().map_err(detect_err)?;
    let config = entry.detector_config();
    let tag = DetectorTag::new(config.model_tag.clone(), fewshot);
    let wanted: HashSet<&str> = eval.iter().map(|i| i.id.as_str()).collect();
    let mut done = load_cached(path, &wanted, &tag)?;

    // rewrite the file with the usable prefix, dropping any torn line
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?);
        for inst in eval {
            if let Some(p) = done.get(&inst.id) {
                write_prediction_line(&mut f, p).map_err(|e| HarnessError::io(path, e))?;
            }
        }
        f.flush().map_err(|e| HarnessError::io(path, e))?;
    }

    let remaining: Vec<&Instance> = eval.iter().filter(|i| !done.contains_key(&i.id)).collect();
    if !remaining.is_empty() {
        tracing::info!(detector = %entry.name, cached = done.len(), remaining = remaining.len(), "querying detector");
        let policy = match &entry.policy_file {
            Some(p) => PolicyDocument::load(p).map_err(detect_err)?,
            None => PolicyDocument::default(),
        };
        let pool = pool_for(&corpus.instances, fewshot.pool);
        let pool_store = match (&corpus.vectors, fewshot.strategy) {
            (Some(v), Strategy::Rag) => Some(v.subset(pool.iter().map(|i| i.id.as_str()))),
            _ => None,
        };
        let mut jobs = Vec::with_capacity(remaining.len());
        for target in remaining {
            let target_vector = corpus.vectors.as_ref().and_then(|v| v.get(&target.id));
            let examples = select_examples(target, target_vector, fewshot, pool_store.as_ref(), &pool)
                .map_err(detect_err)?;
            let prompt = build_prompt(&policy, &examples, target, &entry.prompt);
            jobs.push((target.clone(), prompt));
        }
        let backend = HttpChatBackend::new(config.clone())
            .map_err(|e| detect_err(DetectError::BackendUnavailable(e)))?;
        let detector = Detector::new(backend, &config, fewshot);
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        let mut file = std::io::LineWriter::new(file);
        let outcome = detector
            .classify_all(jobs, |p| write_prediction_line(&mut file, p).map_err(DetectError::Io))
            .await;
        file.flush().map_err(|e| HarnessError::io(path, e))?;
        for p in outcome.map_err(detect_err)? {
            done.insert(p.instance_id.clone(), p);
        }
    }
    let ordered: Vec<Prediction> = eval.iter().filter_map(|i| done.remove(&i.id)).collect();
    // persist in evaluation order so reruns see identical files
    write_predictions(path, &ordered)?;
    Ok(ordered)
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?);
    for p in predictions {
        write_prediction_line(&mut f, p).map_err(|e| HarnessError::io(path, e))?;
    }
    f.flush().map_err(|e| HarnessError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOptions {
    pub metrics: Vec<Metric>,
    pub bootstrap: BootstrapSettings,
    pub disparity: DisparityOptions,
    pub pair_groups: Vec<(Axis, Axis)>,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            metrics: Metric::HEADLINE.to_vec(),
            bootstrap: BootstrapSettings::default(),
            disparity: DisparityOptions::default(),
            pair_groups: default_pair_groups(),
        }
    }
}

/// A metric that had no defined value for a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UndefinedMetric {
    pub group: String,
    pub metric: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n: usize,
    pub metrics: Vec<MetricValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisMetrics {
    /// Instances whose gold set contains the axis.
    pub support: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<MetricValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub name: String,
    pub detector: DetectorTag,
    pub overall: GroupMetrics,
    pub per_dataset: BTreeMap<String, GroupMetrics>,
    pub per_axis: BTreeMap<Axis, AxisMetrics>,
    pub invalid_rate: MetricValue,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencySummary>,
    pub disparity: DisparityReport,
    pub undefined: Vec<UndefinedMetric>,
}

impl DetectorReport {
    pub fn overall_metric(&self, name: &str) -> Option<&MetricValue> {
        self.overall.metrics.iter().find(|m| m.name == name)
    }
}

/// Pairs each evaluation instance with its prediction, checking coverage.
pub fn join_predictions(eval: &[Instance], predictions: &[Prediction]) -> Result<Vec<EvalPair>> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(predictions.len());
    let mut duplicates = Vec::new();
    for p in predictions {
        if by_id.insert(p.instance_id.as_str(), p).is_some() && !duplicates.contains(&p.instance_id) {
            duplicates.push(p.instance_id.clone());
        }
    }
    if !duplicates.is_empty() {
        return Err(HarnessError::DuplicatePrediction(duplicates));
    }
    let missing: Vec<String> = eval
        .iter()
        .filter(|i| !by_id.contains_key(i.id.as_str()))
        .map(|i| i.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(HarnessError::MissingPrediction(missing));
    }
    let eval_ids: HashSet<&str> = eval.iter().map(|i| i.id.as_str()).collect();
    let extra = predictions.iter().filter(|p| !eval_ids.contains(p.instance_id.as_str())).count();
    if extra > 0 {
        tracing::warn!(extra, "ignoring predictions for instances outside the evaluation set");
    }
    Ok(eval
        .iter()
        .map(|i| {
            let p = by_id[i.id.as_str()];
            EvalPair {
                instance_id: i.id.clone(),
                dataset: i.source_dataset.clone(),
                gold: i.gold,
                pred: if p.invalid { crate::LabelSet::EMPTY } else { p.predicted },
                latency_ms: Some(p.latency_ms),
                invalid: p.invalid,
            }
        })
        .collect())
}

fn group_metrics(
    group: &str,
    pairs: &[EvalPair],
    options: &ScoreOptions,
    undefined: &mut Vec<UndefinedMetric>,
) -> Result<GroupMetrics> {
    let mut metrics = Vec::new();
    for &m in &options.metrics {
        match bootstrap_ci(pairs, m, &options.bootstrap) {
            Ok(v) => metrics.push(v),
            Err(e @ (MetricsError::UndefinedPoint(_) | MetricsError::AllResamplesUndefined(_))) => {
                undefined.push(UndefinedMetric {
                    group: group.to_string(),
                    metric: m.name(),
                    reason: e.to_string(),
                })
            }
            Err(source) => {
                return Err(HarnessError::Metrics {
                    context: format!("{group} {}", m.name()),
                    source,
                })
            }
        }
    }
    Ok(GroupMetrics {
        n: pairs.len(),
        metrics,
    })
}

/// Scores one detector's predictions against the evaluation instances.
pub fn score_predictions(
    name: &str,
    eval: &[Instance],
    predictions: &[Prediction],
    options: &ScoreOptions,
) -> Result<DetectorReport> {
    if eval.is_empty() {
        return Err(HarnessError::Metrics {
            context: name.to_string(),
            source: MetricsError::EmptyInput,
        });
    }
    let pairs = join_predictions(eval, predictions)?;
    let mut undefined = Vec::new();
    let overall = group_metrics("overall", &pairs, options, &mut undefined)?;

    let mut datasets: BTreeMap<String, Vec<EvalPair>> = BTreeMap::new();
    for p in &pairs {
        datasets.entry(p.dataset.clone()).or_default().push(p.clone());
    }
    let mut per_dataset = BTreeMap::new();
    for (ds, ds_pairs) in &datasets {
        per_dataset.insert(
            ds.clone(),
            group_metrics(&format!("dataset {ds}"), ds_pairs, options, &mut undefined)?,
        );
    }

    let mut per_axis = BTreeMap::new();
    for axis in Axis::ALL {
        let support = pairs.iter().filter(|p| p.gold.contains(axis)).count();
        let f1 = match bootstrap_ci(&pairs, Metric::AxisF1(axis), &options.bootstrap) {
            Ok(v) => Some(v),
            Err(e) => {
                undefined.push(UndefinedMetric {
                    group: format!("axis {axis}"),
                    metric: Metric::AxisF1(axis).name(),
                    reason: e.to_string(),
                });
                None
            }
        };
        per_axis.insert(axis, AxisMetrics { support, f1 });
    }

    let invalid_rate = bootstrap_ci(&pairs, Metric::InvalidRate, &options.bootstrap).map_err(|source| {
        HarnessError::Metrics {
            context: format!("{name} invalid rate"),
            source,
        }
    })?;
    let latency = latency_summary(&pairs).ok();
    let disparity = disparity_report(&pairs, &options.pair_groups, &options.disparity)?;
    let detector = predictions
        .iter()
        .find(|p| p.instance_id == eval[0].id)
        .map(|p| p.detector.clone())
        .expect("coverage checked");
    Ok(DetectorReport {
        name: name.to_string(),
        detector,
        overall,
        per_dataset,
        per_axis,
        invalid_rate,
        latency,
        disparity,
        undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub n_instances: usize,
    pub n_evaluated: usize,
    pub n_skipped: usize,
    pub n_dedup_removed: usize,
    pub splits: BTreeMap<String, usize>,
}

impl CorpusSummary {
    pub fn new(instances: &[Instance], eval: &[Instance], skipped: usize, dedup_removed: usize) -> Self {
        let mut splits = BTreeMap::new();
        for i in instances {
            let key = match i.split {
                Split::Train => "train",
                Split::Dev => "dev",
                Split::Test => "test",
                Split::Unassigned => "unassigned",
            };
            *splits.entry(key.to_string()).or_insert(0) += 1;
        }
        Self {
            n_instances: instances.len(),
            n_evaluated: eval.len(),
            n_skipped: skipped,
            n_dedup_removed: dedup_removed,
            splits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seeds: ResolvedSeeds,
    pub bootstrap: BootstrapSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    pub corpus: CorpusSummary,
    pub detectors: Vec<DetectorReport>,
}

/// Wall-clock record of a run, kept apart from the report so that the
/// report itself is reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub seeds: ResolvedSeeds,
}

fn unix_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Runs the full pipeline and writes instances, predictions and reports
/// to the output directory.
pub async fn run_audit(config: &RunConfig) -> Result<EvalReport> {
    config.validate()?;
    let started = unix_ms();
    let out = config.out_dir();
    let pred_dir = out.join("predictions");
    std::fs::create_dir_all(&pred_dir).map_err(|e| HarnessError::io(&pred_dir, e))?;

    let corpus = prepare_corpus(config).await?;
    corpus::write_instances(&out.join("instances.jsonl"), &corpus.instances)
        .map_err(|source| HarnessError::Corpus { stage: "write instances", source })?;
    if config.dedup.enabled {
        corpus::write_jsonl(&out.join("dedup_removed.jsonl"), &corpus.dedup_removed)
            .map_err(|source| HarnessError::Corpus { stage: "write dedup log", source })?;
    }
    let eval = evaluation_set(&corpus.instances);
    let seeds = config.seeds();
    let options = config.score_options()?;

    let mut detectors = Vec::new();
    for entry in &config.detectors {
        let path = pred_dir.join(format!("{}.jsonl", entry.name));
        let predictions = if entry.is_live() {
            let mut entry = entry.clone();
            entry.policy_file = entry.policy_file.as_ref().map(|p| config.resolve(p));
            run_detector(&entry, &entry.fewshot(seeds.fewshot), &corpus, &eval, &path).await?
        } else {
            let src = config.resolve(entry.predictions.as_ref().expect("validated"));
            let preds = read_predictions(&src).map_err(|source| HarnessError::Detect {
                detector: entry.name.clone(),
                source,
            })?;
            write_predictions(&path, &preds)?;
            preds
        };
        tracing::info!(detector = %entry.name, n = predictions.len(), "scoring");
        detectors.push(score_predictions(&entry.name, &eval, &predictions, &options)?);
    }

    let report = EvalReport {
        provenance: Provenance {
            tool_version: TOOL_VERSION.to_string(),
            seeds,
            bootstrap: options.bootstrap,
        },
        config: Some(config.clone()),
        corpus: CorpusSummary::new(&corpus.instances, &eval, corpus.skipped, corpus.dedup_removed.len()),
        detectors,
    };
    write_reports(&report, &out, &config.output.formats)?;
    let record = RunRecord {
        tool_version: TOOL_VERSION.to_string(),
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
        seeds,
    };
    let path = out.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&record).expect("serializable"))
        .map_err(|e| HarnessError::io(&path, e))?;
    Ok(report)
}

pub fn write_reports(report: &EvalReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut written = Vec::new();
    for &f in formats {
        let path = dir.join(f.file_name());
        std::fs::write(&path, render(report, f)).map_err(|e| HarnessError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn render(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("serializable");
            s.push('\n');
            s
        }
        ReportFormat::Markdown => render_markdown(report),
        ReportFormat::Csv => render_csv(report),
    }
}

/// F1-type metrics are shown as percentages.
fn is_percent(name: &str) -> bool {
    name.starts_with("F1")
}

fn fmt_number(name: &str, v: f64) -> String {
    if is_percent(name) {
        format!("{:.2}", v * 100.0)
    } else {
        format!("{v:.3}")
    }
}

/// `point±halfwidth`, e.g. `92.04±0.33`.
pub fn format_metric(m: &MetricValue) -> String {
    let point = fmt_number(&m.name, m.point);
    match m.half_width() {
        Some(h) => format!("{point}±{}", fmt_number(&m.name, h)),
        None => point,
    }
}

fn cell(metrics: &[MetricValue], name: &str) -> String {
    metrics
        .iter()
        .find(|m| m.name == name)
        .map(format_metric)
        .unwrap_or_else(|| "n/a".into())
}

fn setup_label(tag: &DetectorTag) -> String {
    FewShotSpec {
        strategy: tag.strategy,
        k: tag.shots,
        seed: 0,
        pool: PoolSelector::TrainDev,
    }
    .label()
}

fn fmt_rate(v: Option<f64>) -> String {
    v.map(|r| format!("{r:.3}")).unwrap_or_else(|| "n/a".into())
}

fn render_markdown(report: &EvalReport) -> String {
    let mut s = String::new();
    let p = &report.provenance;
    let c = &report.corpus;
    let _ = writeln!(s, "# Bias detection audit\n");
    let _ = writeln!(
        s,
        "{} instances evaluated of {} ({} skipped at ingest, {} removed as near-duplicates).",
        c.n_evaluated, c.n_instances, c.n_skipped, c.n_dedup_removed
    );
    let _ = writeln!(
        s,
        "Intervals: {:.0}% percentile bootstrap, {} resamples. Seeds: split {}, bootstrap {}, few-shot {}.\n",
        p.bootstrap.level * 100.0,
        p.bootstrap.n_resamples,
        p.seeds.split,
        p.seeds.bootstrap,
        p.seeds.fewshot
    );

    let columns: Vec<String> = Metric::HEADLINE.iter().map(|m| m.name()).collect();
    let _ = writeln!(s, "## Detection performance\n");
    let _ = writeln!(
        s,
        "Binary: F1, FPR, FNR. Multi-label: MR, HL, F1μ, F1M. F1 scores in percent; Time is the median latency in ms.\n"
    );
    let _ = writeln!(s, "| Detector | Model | Setup | {} | Time |", columns.join(" | "));
    let _ = writeln!(s, "|---|---|---|{}---:|", "---:|".repeat(columns.len()));
    for d in &report.detectors {
        let cells: Vec<String> = columns.iter().map(|n| cell(&d.overall.metrics, n)).collect();
        let time = d
            .latency
            .map(|l| format!("{:.0}", l.median_ms))
            .unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            d.name,
            d.detector.model,
            setup_label(&d.detector),
            cells.join(" | "),
            time
        );
    }
    s.push('\n');
    for d in &report.detectors {
        let _ = writeln!(s, "Invalid responses ({}): {}", d.name, format_metric(&d.invalid_rate));
    }
    s.push('\n');

    let _ = writeln!(s, "## Per dataset\n");
    let _ = writeln!(s, "| Detector | Dataset | N | {} |", columns.join(" | "));
    let _ = writeln!(s, "|---|---|---:|{}", "---:|".repeat(columns.len()));
    for d in &report.detectors {
        for (ds, g) in &d.per_dataset {
            let cells: Vec<String> = columns.iter().map(|n| cell(&g.metrics, n)).collect();
            let _ = writeln!(s, "| {} | {} | {} | {} |", d.name, ds, g.n, cells.join(" | "));
        }
    }
    s.push('\n');

    let _ = writeln!(s, "## Per axis F1\n");
    let codes: Vec<&str> = Axis::ALL.iter().map(|a| a.code()).collect();
    let _ = writeln!(s, "| Detector | {} |", codes.join(" | "));
    let _ = writeln!(s, "|---|{}", "---:|".repeat(codes.len()));
    for d in &report.detectors {
        let cells: Vec<String> = Axis::ALL
            .iter()
            .map(|a| {
                d.per_axis
                    .get(a)
                    .and_then(|m| m.f1.as_ref())
                    .map(format_metric)
                    .unwrap_or_else(|| "n/a".into())
            })
            .collect();
        let _ = writeln!(s, "| {} | {} |", d.name, cells.join(" | "));
    }
    s.push('\n');

    let _ = writeln!(s, "## Disparity\n");
    for d in &report.detectors {
        let _ = writeln!(s, "### {}\n", d.name);
        let dis = &d.disparity;
        let any_gap = dis.delta_fnr.value.is_some()
            || dis.delta_fpr.value.is_some()
            || dis.pair_gaps.iter().any(|g| g.gap.value.is_some());
        if !any_gap {
            let _ = writeln!(s, "Omitted: the evaluation set supports no disparity gap.\n");
            continue;
        }
        let _ = writeln!(
            s,
            "FPR base: {}. False negative: {}.\n",
            match dis.options.fpr_base {
                FprBase::Disjoint => "instances sharing no axis with the group",
                FprBase::UnbiasedOnly => "unbiased instances",
            },
            match dis.options.fn_rule {
                FnRule::Coverage => "prediction misses an axis of the group",
                FnRule::Binary => "prediction is unbiased",
            }
        );
        let _ = writeln!(s, "| Axis | FNR | n (FNR) | FPR | n (FPR) |");
        let _ = writeln!(s, "|---|---:|---:|---:|---:|");
        for (axis, r) in &dis.per_axis {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                axis,
                fmt_rate(r.fnr),
                r.support_pos,
                fmt_rate(r.fpr),
                r.support_neg
            );
        }
        s.push('\n');
        for (label, entry) in [("Δ FNR", &dis.delta_fnr), ("Δ FPR", &dis.delta_fpr)] {
            match (&entry.value, &entry.error) {
                (Some(g), _) => {
                    let (a, b) = g.argmax_pair;
                    let _ = writeln!(s, "- {label}: {:.3} ({a} vs {b})", g.delta);
                }
                (None, Some(e)) => {
                    let _ = writeln!(s, "- {label}: n/a ({e})");
                }
                (None, None) => {}
            }
        }
        for pg in &dis.pair_gaps {
            match (&pg.gap.value, &pg.gap.error) {
                (Some(g), _) => {
                    let [(a, ra), (b, rb)] = g.constituent_rates;
                    let _ = writeln!(
                        s,
                        "- G {} {}: {:.3} (pair {:.3}, {a} {ra:.3}, {b} {rb:.3})",
                        pg.rate_kind, pg.group, g.g, g.pair_rate
                    );
                }
                (None, Some(e)) => {
                    let _ = writeln!(s, "- G {} {}: n/a ({e})", pg.rate_kind, pg.group);
                }
                (None, None) => {}
            }
        }
        s.push('\n');
    }

    let undefined: Vec<(&str, &UndefinedMetric)> = report
        .detectors
        .iter()
        .flat_map(|d| d.undefined.iter().map(move |u| (d.name.as_str(), u)))
        .collect();
    if !undefined.is_empty() {
        let _ = writeln!(s, "## Undefined metrics\n");
        for (name, u) in undefined {
            let _ = writeln!(s, "- {name}, {}, {}: {}", u.group, u.metric, u.reason);
        }
    }
    s
}

fn render_csv(report: &EvalReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["detector", "group_kind", "group", "metric", "point", "ci_low", "ci_high", "n"])
        .expect("in-memory write");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut row = |d: &str, kind: &str, group: &str, m: &MetricValue| {
        w.write_record([
            d,
            kind,
            group,
            &m.name,
            &m.point.to_string(),
            &opt(m.ci_low),
            &opt(m.ci_high),
            &m.n.to_string(),
        ])
        .expect("in-memory write");
    };
    for d in &report.detectors {
        for m in &d.overall.metrics {
            row(&d.name, "overall", "all", m);
        }
        row(&d.name, "overall", "all", &d.invalid_rate);
        if let Some(l) = d.latency {
            row(&d.name, "overall", "all", &MetricValue::point_only("median_latency_ms", l.median_ms, l.n));
        }
        for (ds, g) in &d.per_dataset {
            for m in &g.metrics {
                row(&d.name, "dataset", ds, m);
            }
        }
        for (axis, a) in &d.per_axis {
            if let Some(m) = &a.f1 {
                row(&d.name, "axis", axis.code(), m);
            }
        }
        for (axis, r) in &d.disparity.per_axis {
            for kind in [RateKind::Fnr, RateKind::Fpr] {
                if let Some(v) = r.rate(kind) {
                    let n = match kind {
                        RateKind::Fnr => r.support_pos,
                        RateKind::Fpr => r.support_neg,
                    };
                    row(&d.name, "axis", axis.code(), &MetricValue::point_only(format!("group_{kind}"), v, n));
                }
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}
