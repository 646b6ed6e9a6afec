//! Policy-prompted LLM detectors: policy documents, few-shot example
//! selection, prompt assembly, chat-completion calls and response parsing.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::future::Future;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, LazyLock};
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::Instance;
use crate::embedstore::{fill_template, EmbedError, VectorStore};
use crate::retry::{RetryPolicy, TransportError};
use crate::taxonomy::{axis_from_policy_code, is_biased, Axis, LabelSet, PolicyVerdict};

/// Line introducing the text under classification in the user turn.
pub const TARGET_MARKER: &str = "Text to classify:";

pub const DEFAULT_POLICY: &str = include_str!("../data/policy.txt");

const DEFAULT_PREAMBLE: &str = "Task: Check whether the text below contains social bias against \
demographic groups according to the social bias policy. A text may target several groups at once.\n\n\
<BEGIN SOCIAL BIAS POLICY>";

const POLICY_END: &str = "<END SOCIAL BIAS POLICY>";

const DEFAULT_ANSWER_FORMAT: &str = "Answer with the codes of every category from S1 to S9 that \
the text targets, separated by commas (for example: S1, S5). Answer S10 only if no other category applies.";

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("policy file: {0}")]
    Policy(String),
    #[error("invalid few-shot spec: {0}")]
    InvalidSpec(String),
    #[error("pool has {available} {class} candidates, {required} required")]
    InsufficientPool {
        class: &'static str,
        required: usize,
        available: usize,
    },
    #[error("no embedding for `{0}`")]
    MissingEmbedding(String),
    #[error("retrieved example `{0}` is not in the pool")]
    UnknownExample(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("detector backend unavailable: {0}")]
    BackendUnavailable(TransportError),
    #[error("detector request timed out")]
    Timeout,
    #[error("prediction file line {line}: {message}")]
    PredictionFile { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyCategory {
    /// `S1` .. `S10`.
    pub code: String,
    pub title: String,
    /// The section exactly as written in the policy file, heading included.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub preamble: String,
    pub categories: Vec<PolicyCategory>,
    pub answer_format: String,
}

static HEADING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(S(?:10|[1-9])):\s*(.*?)\s*$").expect("valid regex"));

impl PolicyDocument {
    /// Parses a plain-text policy with `S<n>: Title` section headings.
    /// Any non-blank text before `S1` replaces the default preamble.
    pub fn parse(text: &str) -> Result<Self, DetectError> {
        let mut leading = String::new();
        let mut categories: Vec<PolicyCategory> = Vec::new();
        for line in text.lines() {
            if let Some(c) = HEADING.captures(line) {
                categories.push(PolicyCategory {
                    code: c[1].to_string(),
                    title: c[2].trim_end_matches('.').to_string(),
                    text: String::new(),
                });
            }
            match categories.last_mut() {
                Some(cat) => {
                    cat.text.push_str(line);
                    cat.text.push('\n');
                }
                None => {
                    leading.push_str(line);
                    leading.push('\n');
                }
            }
        }
        for cat in &mut categories {
            cat.text = cat.text.trim_end().to_string();
        }
        let expected: Vec<String> = (1..=10).map(|i| format!("S{i}")).collect();
        let got: Vec<&str> = categories.iter().map(|c| c.code.as_str()).collect();
        if got != expected {
            return Err(DetectError::Policy(format!(
                "expected sections S1..S10 in order, found [{}]",
                got.join(", ")
            )));
        }
        let leading = leading.trim();
        Ok(Self {
            preamble: if leading.is_empty() {
                DEFAULT_PREAMBLE.to_string()
            } else {
                leading.to_string()
            },
            categories,
            answer_format: DEFAULT_ANSWER_FORMAT.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, DetectError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DetectError::Policy(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn title_of(&self, code: &str) -> Option<&str> {
        self.categories
            .iter()
            .find(|c| c.code == code)
            .map(|c| c.title.as_str())
    }

    /// All ten sections, verbatim, separated by newlines.
    pub fn policy_text(&self) -> String {
        self.categories
            .iter()
            .map(|c| c.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl Default for PolicyDocument {
    fn default() -> Self {
        Self::parse(DEFAULT_POLICY).expect("bundled policy is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    None,
    #[serde(alias = "random")]
    RandomBalanced,
    Rag,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "zero-shot" => Ok(Strategy::None),
            "random" | "random_balanced" | "random-balanced" => Ok(Strategy::RandomBalanced),
            "rag" => Ok(Strategy::Rag),
            other => Err(format!("unknown few-shot strategy `{other}`")),
        }
    }
}

/// Which non-evaluation split supplies few-shot examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolSelector {
    #[default]
    TrainDev,
    Train,
    Dev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub strategy: Strategy,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pool: PoolSelector,
}

impl FewShotSpec {
    pub fn zero_shot() -> Self {
        Self {
            strategy: Strategy::None,
            k: 0,
            seed: 0,
            pool: PoolSelector::TrainDev,
        }
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        match (self.strategy, self.k) {
            (Strategy::None, 0) => Ok(()),
            (Strategy::None, k) => Err(DetectError::InvalidSpec(format!("{k} shots with strategy none"))),
            (_, 0) => Err(DetectError::InvalidSpec("0 shots needs strategy none".into())),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::None => "0-shot".into(),
            Strategy::RandomBalanced => format!("{}-shot random", self.k),
            Strategy::Rag => format!("{}-shot rag", self.k),
        }
    }
}

fn target_seed(seed: u64, target_id: &str) -> u64 {
    let digest = Sha256::digest(target_id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    crate::metrics::resample_seed(seed, u64::from_le_bytes(b))
}

/// Few-shot examples for `target`.
///
/// RAG ranks `pool_store` (vectors keyed by pool instance id) against
/// `target_vector`. Random-balanced draws `ceil(k/2)` biased then
/// `floor(k/2)` unbiased pool instances under a seed derived from
/// `spec.seed` and the target id.
pub fn select_examples(
    target: &Instance,
    target_vector: Option<&crate::embedstore::EmbeddingVector>,
    spec: &FewShotSpec,
    pool_store: Option<&VectorStore>,
    pool: &[Instance],
) -> Result<Vec<Instance>, DetectError> {
    spec.validate()?;
    match spec.strategy {
        Strategy::None => Ok(Vec::new()),
        Strategy::Rag => {
            let store = pool_store.ok_or_else(|| DetectError::InvalidSpec("rag needs a pool vector store".into()))?;
            let query = target_vector.ok_or_else(|| DetectError::MissingEmbedding(target.id.clone()))?;
            let exclude: HashSet<String> = [target.id.clone()].into();
            let available = store.len() - usize::from(store.contains(&target.id));
            if available < spec.k {
                return Err(DetectError::InsufficientPool {
                    class: "retrievable",
                    required: spec.k,
                    available,
                });
            }
            let by_id: HashMap<&str, &Instance> = pool.iter().map(|i| (i.id.as_str(), i)).collect();
            store
                .top_k(query, spec.k, &exclude)?
                .into_iter()
                .map(|(id, _)| {
                    by_id
                        .get(id.as_str())
                        .map(|i| (*i).clone())
                        .ok_or(DetectError::UnknownExample(id))
                })
                .collect()
        }
        Strategy::RandomBalanced => {
            let (biased, unbiased): (Vec<&Instance>, Vec<&Instance>) = pool
                .iter()
                .filter(|i| i.id != target.id)
                .partition(|i| is_biased(i.gold));
            let want_biased = spec.k.div_ceil(2);
            let want_unbiased = spec.k / 2;
            for (class, have, want) in [
                ("biased", biased.len(), want_biased),
                ("unbiased", unbiased.len(), want_unbiased),
            ] {
                if have < want {
                    return Err(DetectError::InsufficientPool {
                        class,
                        required: want,
                        available: have,
                    });
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(target_seed(spec.seed, &target.id));
            let mut out = Vec::with_capacity(spec.k);
            for (group, want) in [(&biased, want_biased), (&unbiased, want_unbiased)] {
                for idx in rand::seq::index::sample(&mut rng, group.len(), want) {
                    out.push(group[idx].clone());
                }
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerStyle {
    /// `S1, S5`
    #[default]
    Codes,
    /// `S1 (Gender and Sexual Identity Bias), S5 (...)`
    Names,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExamplePlacement {
    #[default]
    User,
    System,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptOptions {
    #[serde(default)]
    pub answer_style: AnswerStyle,
    #[serde(default)]
    pub example_placement: ExamplePlacement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    /// Both turns as one text.
    pub fn to_text(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }
}

fn render_answer(policy: &PolicyDocument, labels: LabelSet, style: AnswerStyle) -> String {
    let codes: Vec<String> = if labels.is_empty() {
        vec!["S10".to_string()]
    } else {
        labels.axes().map(Axis::policy_code).collect()
    };
    match style {
        AnswerStyle::Codes => codes.join(", "),
        AnswerStyle::Names => codes
            .iter()
            .map(|c| match policy.title_of(c) {
                Some(t) => format!("{c} ({t})"),
                None => c.clone(),
            })
            .collect::<Vec<_>>()
            .join(", "),
    }
}

pub fn build_prompt(
    policy: &PolicyDocument,
    examples: &[Instance],
    target: &Instance,
    options: &PromptOptions,
) -> Prompt {
    let mut system = format!("{}\n{}\n{}", policy.preamble, policy.policy_text(), POLICY_END);
    let mut block = String::new();
    if !examples.is_empty() {
        block.push_str("Examples:\n");
        for (i, ex) in examples.iter().enumerate() {
            let _ = write!(
                block,
                "\nExample {}:\nText: {}\nAnswer: {}\n",
                i + 1,
                ex.text,
                render_answer(policy, ex.gold, options.answer_style)
            );
        }
    }
    let mut user = String::new();
    match options.example_placement {
        ExamplePlacement::System if !block.is_empty() => {
            system.push_str("\n\n");
            system.push_str(block.trim_end());
        }
        _ if !block.is_empty() => {
            user.push_str(&block);
            user.push('\n');
        }
        _ => {}
    }
    let _ = write!(user, "{}\n\n{}\n{}", policy.answer_format, TARGET_MARKER, target.text);
    Prompt { system, user }
}

static CODE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bS(10|[1-9])\b").expect("valid regex"));

/// Parsed detector answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedResponse {
    pub labels: LabelSet,
    pub invalid: bool,
}

/// Extracts S1..S10 codes. Any S1..S9 code overrides S10; no code at all is invalid.
pub fn parse_response(raw: &str) -> ParsedResponse {
    let mut labels = LabelSet::EMPTY;
    let mut saw_any = false;
    for c in CODE.captures_iter(raw) {
        saw_any = true;
        if let Ok(PolicyVerdict::Axis(a)) = axis_from_policy_code(&format!("S{}", &c[1])) {
            labels.insert(a);
        }
    }
    ParsedResponse {
        labels,
        invalid: !saw_any,
    }
}

/// Identifies the detector configuration that produced a prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorTag {
    pub model: String,
    pub strategy: Strategy,
    pub shots: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DetectorTag {
    pub fn new(model: impl Into<String>, spec: &FewShotSpec) -> Self {
        Self {
            model: model.into(),
            strategy: spec.strategy,
            shots: spec.k,
            seed: (spec.strategy == Strategy::RandomBalanced).then_some(spec.seed),
        }
    }
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "id")]
    pub instance_id: String,
    #[serde(rename = "axes")]
    pub predicted: LabelSet,
    #[serde(default)]
    pub invalid: bool,
    #[serde(rename = "raw", default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default)]
    pub latency_ms: f64,
    pub detector: DetectorTag,
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, DetectError> {
    let file = std::fs::File::open(path)?;
    read_predictions_from(std::io::BufReader::new(file))
}

pub fn read_predictions_from(reader: impl BufRead) -> Result<Vec<Prediction>, DetectError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut p: Prediction = serde_json::from_str(&line).map_err(|e| DetectError::PredictionFile {
            line: i + 1,
            message: e.to_string(),
        })?;
        if p.latency_ms < 0.0 || !p.latency_ms.is_finite() {
            return Err(DetectError::PredictionFile {
                line: i + 1,
                message: format!("latency_ms {} is not a non-negative number", p.latency_ms),
            });
        }
        if p.invalid {
            p.predicted = LabelSet::EMPTY;
        }
        out.push(p);
    }
    Ok(out)
}

/// Like [`read_predictions`], but a truncated final line (an interrupted
/// write) is dropped instead of failing.
pub fn read_partial_predictions(path: &Path) -> Result<Vec<Prediction>, DetectError> {
    let text = std::fs::read_to_string(path)?;
    let complete = match text.rfind('\n') {
        Some(pos) if pos + 1 < text.len() => &text[..=pos],
        Some(_) => text.as_str(),
        None => "",
    };
    read_predictions_from(complete.as_bytes())
}

pub fn write_prediction_line(mut w: impl std::io::Write, p: &Prediction) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, p)?;
    w.write_all(b"\n")
}

/// Milliseconds since an arbitrary origin.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> f64;
}

pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1000.0
    }
}

/// Advances by a fixed step on every reading.
pub struct StepClock {
    step_ms: f64,
    ticks: AtomicU64,
}

impl StepClock {
    pub fn new(step_ms: f64) -> Self {
        Self {
            step_ms,
            ticks: AtomicU64::new(0),
        }
    }
}

impl Clock for StepClock {
    fn now_ms(&self) -> f64 {
        self.ticks.fetch_add(1, Ordering::SeqCst) as f64 * self.step_ms
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectorConfig {
    /// Full URL of the chat-completion endpoint.
    pub endpoint: String,
    pub model_tag: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "one")]
    pub top_p: f64,
    #[serde(default = "three")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "four")]
    pub max_inflight: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    /// Extra top-level request fields (e.g. `max_tokens`).
    #[serde(default)]
    pub extra_body: serde_json::Map<String, Value>,
    /// JSON pointer to the answer text in the response.
    #[serde(default = "default_content_pointer")]
    pub response_pointer: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
}

fn one() -> f64 {
    1.0
}
fn three() -> u32 {
    3
}
fn four() -> usize {
    4
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_content_pointer() -> String {
    "/choices/0/message/content".into()
}

impl DetectorConfig {
    pub fn new(endpoint: impl Into<String>, model_tag: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_tag: model_tag.into(),
            temperature: 0.0,
            top_p: 1.0,
            max_retries: three(),
            timeout_ms: default_timeout_ms(),
            max_inflight: four(),
            backoff_base_ms: default_backoff_ms(),
            extra_body: Default::default(),
            response_pointer: default_content_pointer(),
            api_key_env: None,
        }
    }

    /// Warns when decoding is not deterministic.
    pub fn check_decoding(&self) {
        if self.temperature != 0.0 || self.top_p != 1.0 {
            tracing::warn!(
                temperature = self.temperature,
                top_p = self.top_p,
                "non-deterministic decoding overrides temperature=0/top_p=1"
            );
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay_ms: self.backoff_base_ms,
            max_delay_ms: self.backoff_base_ms.saturating_mul(64),
            jitter: true,
        }
    }

    pub fn request_body(&self, prompt: &Prompt) -> Value {
        let mut body = serde_json::json!({
            "model": self.model_tag,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
            "temperature": self.temperature,
            "top_p": self.top_p,
        });
        let obj = body.as_object_mut().expect("object literal");
        for (k, v) in &self.extra_body {
            let v = fill_template(v, &[("model", Value::from(self.model_tag.clone()))]);
            obj.insert(k.clone(), v);
        }
        body
    }
}

/// A single chat-completion attempt.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, prompt: &Prompt) -> impl Future<Output = Result<String, TransportError>> + Send;
}

pub struct HttpChatBackend {
    config: DetectorConfig,
    client: reqwest::Client,
    api_key: Option<String>,
}

impl HttpChatBackend {
    pub fn new(config: DetectorConfig) -> Result<Self, TransportError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| TransportError::Unavailable(e.to_string()))?;
        let api_key = config.api_key_env.as_ref().and_then(|n| std::env::var(n).ok());
        Ok(Self {
            config,
            client,
            api_key,
        })
    }
}

impl ChatBackend for HttpChatBackend {
    async fn complete(&self, prompt: &Prompt) -> Result<String, TransportError> {
        let mut req = self
            .client
            .post(&self.config.endpoint)
            .json(&self.config.request_body(prompt));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(TransportError::from_status(status.as_u16(), body));
        }
        let value: Value = resp.json().await?;
        value
            .pointer(&self.config.response_pointer)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                TransportError::BadResponse(format!("no text at `{}`", self.config.response_pointer))
            })
    }
}

pub struct Detector<B> {
    backend: B,
    tag: DetectorTag,
    retry: RetryPolicy,
    max_inflight: usize,
    clock: Arc<dyn Clock>,
}

impl<B: ChatBackend> Detector<B> {
    pub fn new(backend: B, config: &DetectorConfig, fewshot: &FewShotSpec) -> Self {
        config.check_decoding();
        Self {
            backend,
            tag: DetectorTag::new(config.model_tag.clone(), fewshot),
            retry: config.retry_policy(),
            max_inflight: config.max_inflight.max(1),
            clock: Arc::new(SystemClock::default()),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn tag(&self) -> &DetectorTag {
        &self.tag
    }

    /// Sends one request (retrying transport failures) and parses the answer.
    /// Latency is that of the final attempt.
    pub async fn classify(&self, target: &Instance, prompt: &Prompt) -> Result<Prediction, DetectError> {
        let (raw, latency) = self
            .retry
            .run(|_| async {
                let start = self.clock.now_ms();
                let out = self.backend.complete(prompt).await?;
                Ok((out, (self.clock.now_ms() - start).max(0.0)))
            })
            .await
            .map_err(|e| match e {
                TransportError::Timeout => DetectError::Timeout,
                other => DetectError::BackendUnavailable(other),
            })?;
        let parsed = parse_response(&raw);
        Ok(Prediction {
            instance_id: target.id.clone(),
            predicted: if parsed.invalid { LabelSet::EMPTY } else { parsed.labels },
            invalid: parsed.invalid,
            raw_response: Some(raw),
            latency_ms: latency,
            detector: self.tag.clone(),
        })
    }

    /// Classifies `targets` with bounded parallelism. `sink` sees predictions
    /// in target order; the first failure stops the run after the
    /// predictions before it have been delivered.
    pub async fn classify_all<F>(&self, jobs: Vec<(Instance, Prompt)>, mut sink: F) -> Result<Vec<Prediction>, DetectError>
    where
        F: FnMut(&Prediction) -> Result<(), DetectError>,
    {
        let mut results = stream::iter(jobs.iter())
            .map(|(target, prompt)| self.classify(target, prompt))
            .buffered(self.max_inflight);
        let mut out = Vec::with_capacity(jobs.len());
        while let Some(r) = results.next().await {
            let p = r?;
            sink(&p)?;
            out.push(p);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::EmbeddingVector;
    use std::sync::Mutex;

    fn ls(axes: &[Axis]) -> LabelSet {
        axes.iter().copied().collect()
    }

    fn inst(id: &str, text: &str, gold: LabelSet) -> Instance {
        Instance::new(id, text, "d", gold)
    }

    #[test]
    fn bundled_policy_has_ten_sections() {
        let p = PolicyDocument::default();
        assert_eq!(p.categories.len(), 10);
        assert_eq!(p.title_of("S5"), Some("Race and Ethnicity Bias"));
        assert_eq!(p.title_of("S10"), Some("Safe and Unbiased Text"));
        assert!(p.categories[9].text.contains("DO NOT SELECT THIS CLASS IF TEXT BELONGS TO ANY OTHER CATEGORY"));
        assert_eq!(p.policy_text(), DEFAULT_POLICY.trim_end());
    }

    #[test]
    fn policy_parse_rejects_missing_sections() {
        let text = "S1: A.\nbody\nS2: B.\n";
        assert!(matches!(PolicyDocument::parse(text), Err(DetectError::Policy(_))));
        let custom = format!("Custom instructions.\n{DEFAULT_POLICY}");
        assert_eq!(PolicyDocument::parse(&custom).unwrap().preamble, "Custom instructions.");
    }

    #[test]
    fn parse_response_examples() {
        let r = parse_response("Categories: S2 and S7.");
        assert_eq!(r, ParsedResponse { labels: ls(&[Axis::So, Axis::Rel]), invalid: false });
        assert_eq!(parse_response("S10"), ParsedResponse { labels: LabelSet::EMPTY, invalid: false });
        assert_eq!(
            parse_response("The text is problematic."),
            ParsedResponse { labels: LabelSet::EMPTY, invalid: true }
        );
        assert_eq!(parse_response("S10, s1").labels, ls(&[Axis::Gen]));
        assert!(parse_response("S11 S0 S5a").invalid);
        assert_eq!(parse_response("S1,S5").labels, ls(&[Axis::Gen, Axis::Rac]));
    }

    #[test]
    fn prompt_structure() {
        let policy = PolicyDocument::default();
        let target = inst("t", "Target sentence.", LabelSet::EMPTY);
        let p = build_prompt(&policy, &[], &target, &PromptOptions::default());
        assert!(p.system.contains(&policy.policy_text()));
        assert!(!p.user.contains("Example 1"));
        assert!(p.user.ends_with("Text to classify:\nTarget sentence."));

        let ex = vec![
            inst("e1", "first", ls(&[Axis::Gen, Axis::Rac])),
            inst("e2", "second", LabelSet::EMPTY),
        ];
        let p = build_prompt(&policy, &ex, &target, &PromptOptions::default());
        assert_eq!(p.user.matches("\nExample ").count(), 2);
        let first = p.user.find("Text: first\nAnswer: S1, S5").unwrap();
        let second = p.user.find("Text: second\nAnswer: S10").unwrap();
        assert!(first < second);
        assert_eq!(p, build_prompt(&policy, &ex, &target, &PromptOptions::default()));

        let names = PromptOptions { answer_style: AnswerStyle::Names, example_placement: ExamplePlacement::System };
        let p = build_prompt(&policy, &ex, &target, &names);
        assert!(p.system.contains("Answer: S1 (Gender and Sexual Identity Bias), S5 (Race and Ethnicity Bias)"));
        assert!(!p.user.contains("Example 1"));
    }

    fn pool(nb: usize, nu: usize) -> Vec<Instance> {
        let mut v = Vec::new();
        for i in 0..nb {
            v.push(inst(&format!("b{i:03}"), "biased", ls(&[Axis::Age])));
        }
        for i in 0..nu {
            v.push(inst(&format!("u{i:03}"), "fine", LabelSet::EMPTY));
        }
        v
    }

    #[test]
    fn random_balanced_selection() {
        let pool = pool(100, 100);
        let target = inst("t", "x", LabelSet::EMPTY);
        let spec = FewShotSpec { strategy: Strategy::RandomBalanced, k: 5, seed: 1, pool: PoolSelector::Train };
        let a = select_examples(&target, None, &spec, None, &pool).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a.iter().filter(|i| is_biased(i.gold)).count(), 3);
        assert_eq!(a, select_examples(&target, None, &spec, None, &pool).unwrap());
        let b = select_examples(&target, None, &FewShotSpec { seed: 2, ..spec }, None, &pool).unwrap();
        assert_ne!(a, b);
        let ids: HashSet<_> = a.iter().map(|i| &i.id).collect();
        assert_eq!(ids.len(), 5);

        let small = self::pool(2, 10);
        assert!(matches!(
            select_examples(&target, None, &spec, None, &small),
            Err(DetectError::InsufficientPool { class: "biased", required: 3, available: 2 })
        ));
        assert!(select_examples(&target, None, &FewShotSpec::zero_shot(), None, &small).unwrap().is_empty());
    }

    #[test]
    fn rag_selection_follows_similarity() {
        let pool = vec![
            inst("a", "A", ls(&[Axis::Gen])),
            inst("b", "B", LabelSet::EMPTY),
            inst("c", "C", ls(&[Axis::Rac])),
        ];
        let mut store = VectorStore::new("m");
        for (id, v) in [("a", [1.0f32, 0.0]), ("b", [0.0, 1.0]), ("c", [0.9, 0.1])] {
            store.insert(EmbeddingVector::new(id, "m", v.to_vec()).unwrap()).unwrap();
        }
        let target = inst("t", "T", LabelSet::EMPTY);
        let q = EmbeddingVector::new("t", "m", vec![1.0, 0.0]).unwrap();
        let spec = FewShotSpec { strategy: Strategy::Rag, k: 2, seed: 0, pool: PoolSelector::TrainDev };
        let got = select_examples(&target, Some(&q), &spec, Some(&store), &pool).unwrap();
        assert_eq!(got.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), ["a", "c"]);

        // a pool member used as its own target is never retrieved
        let self_target = pool[0].clone();
        let got = select_examples(&self_target, Some(&q), &spec, Some(&store), &pool).unwrap();
        assert!(got.iter().all(|i| i.id != "a"));

        let big = FewShotSpec { k: 3, ..spec };
        assert!(matches!(
            select_examples(&self_target, Some(&q), &big, Some(&store), &pool),
            Err(DetectError::InsufficientPool { .. })
        ));
    }

    #[test]
    fn spec_validation() {
        let bad = FewShotSpec { strategy: Strategy::None, k: 3, seed: 0, pool: PoolSelector::Train };
        assert!(bad.validate().is_err());
        let bad = FewShotSpec { strategy: Strategy::Rag, k: 0, ..bad };
        assert!(bad.validate().is_err());
        assert_eq!("random".parse::<Strategy>(), Ok(Strategy::RandomBalanced));
    }

    #[test]
    fn prediction_file_schema() {
        let p = Prediction {
            instance_id: "x".into(),
            predicted: ls(&[Axis::Nat]),
            invalid: false,
            raw_response: None,
            latency_ms: 12.5,
            detector: DetectorTag::new("m", &FewShotSpec::zero_shot()),
        };
        let mut buf = Vec::new();
        write_prediction_line(&mut buf, &p).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            line,
            "{\"id\":\"x\",\"axes\":[\"NAT\"],\"invalid\":false,\"latency_ms\":12.5,\"detector\":{\"model\":\"m\",\"strategy\":\"none\",\"shots\":0}}\n"
        );
        assert_eq!(read_predictions_from(buf.as_slice()).unwrap(), vec![p]);
        // invalid rows are normalized to the empty set
        let text = "{\"id\":\"y\",\"axes\":[\"GEN\"],\"invalid\":true,\"latency_ms\":1,\"detector\":{\"model\":\"m\",\"strategy\":\"none\",\"shots\":0}}";
        assert_eq!(read_predictions_from(text.as_bytes()).unwrap()[0].predicted, LabelSet::EMPTY);
        assert!(matches!(
            read_predictions_from("{".as_bytes()),
            Err(DetectError::PredictionFile { line: 1, .. })
        ));
    }

    struct Scripted {
        replies: Mutex<Vec<Result<String, TransportError>>>,
        calls: AtomicU64,
    }

    impl Scripted {
        fn new(mut replies: Vec<Result<String, TransportError>>) -> Self {
            replies.reverse();
            Self { replies: Mutex::new(replies), calls: AtomicU64::new(0) }
        }
    }

    impl ChatBackend for Scripted {
        async fn complete(&self, _prompt: &Prompt) -> Result<String, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies.lock().unwrap().pop().unwrap_or_else(|| Ok("S10".into()))
        }
    }

    fn detector(replies: Vec<Result<String, TransportError>>) -> Detector<Scripted> {
        let cfg = DetectorConfig::new("http://unused", "mock");
        Detector::new(Scripted::new(replies), &cfg, &FewShotSpec::zero_shot())
            .with_retry(RetryPolicy::no_delay(2))
            .with_clock(Arc::new(StepClock::new(5.0)))
    }

    fn prompt() -> Prompt {
        Prompt { system: "s".into(), user: "u".into() }
    }

    #[tokio::test]
    async fn classify_parses_and_times() {
        let t = inst("t", "x", LabelSet::EMPTY);
        let d = detector(vec![Ok("S10".into()), Ok("S1, S5".into()), Ok("I cannot help".into())]);
        let p = d.classify(&t, &prompt()).await.unwrap();
        assert_eq!((p.predicted, p.invalid, p.latency_ms), (LabelSet::EMPTY, false, 5.0));
        let p = d.classify(&t, &prompt()).await.unwrap();
        assert_eq!(p.predicted, ls(&[Axis::Gen, Axis::Rac]));
        let p = d.classify(&t, &prompt()).await.unwrap();
        assert!(p.invalid);
        assert_eq!(p.predicted, LabelSet::EMPTY);
        assert_eq!(p.raw_response.as_deref(), Some("I cannot help"));
        // an unparseable answer is not retried
        assert_eq!(d.backend.calls.load(Ordering::SeqCst), 3);
    }

    #[tokio::test]
    async fn classify_retries_transport_failures() {
        let t = inst("t", "x", LabelSet::EMPTY);
        let d = detector(vec![Err(TransportError::Unavailable("503".into())), Ok("S3".into())]);
        let p = d.classify(&t, &prompt()).await.unwrap();
        assert_eq!(p.predicted, ls(&[Axis::Dis]));
        assert_eq!(d.backend.calls.load(Ordering::SeqCst), 2);

        let d = detector(vec![Err(TransportError::Timeout); 3]);
        assert!(matches!(d.classify(&t, &prompt()).await, Err(DetectError::Timeout)));
        let d = detector(vec![Err(TransportError::Unavailable("down".into())); 3]);
        assert!(matches!(d.classify(&t, &prompt()).await, Err(DetectError::BackendUnavailable(_))));
    }

    #[tokio::test]
    async fn classify_all_keeps_order_and_stops_on_failure() {
        let jobs: Vec<(Instance, Prompt)> =
            (0..4).map(|i| (inst(&format!("t{i}"), "x", LabelSet::EMPTY), prompt())).collect();
        let d = detector(vec![]);
        let mut seen = Vec::new();
        let out = d
            .classify_all(jobs.clone(), |p| {
                seen.push(p.instance_id.clone());
                Ok(())
            })
            .await
            .unwrap();
        assert_eq!(seen, ["t0", "t1", "t2", "t3"]);
        assert_eq!(out.len(), 4);

        let mut replies = vec![Ok("S1".to_string())];
        replies.extend(vec![Err(TransportError::Unavailable("x".into())); 3]);
        let d = detector(replies).with_retry(RetryPolicy::no_delay(2));
        let d = Detector { max_inflight: 1, ..d };
        let mut seen = Vec::new();
        let r = d
            .classify_all(jobs, |p| {
                seen.push(p.instance_id.clone());
                Ok(())
            })
            .await;
        assert!(r.is_err());
        assert_eq!(seen, ["t0"]);
    }

    #[test]
    fn request_body_is_deterministic_decoding() {
        let mut cfg = DetectorConfig::new("http://x", "glm");
        cfg.extra_body.insert("max_tokens".into(), Value::from(16));
        let body = cfg.request_body(&prompt());
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["top_p"], 1.0);
        assert_eq!(body["max_tokens"], 16);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "u");
    }
}
