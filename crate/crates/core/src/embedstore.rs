//! Text embeddings: an HTTP client for embedding services, a content-keyed
//! cache, and an exact cosine-similarity store.
//!
//! # Vector file layout
//!
//! Stores and caches persist to the same little-endian binary layout:
//!
//! ```text
//! magic       4 bytes   b"BAVS"
//! version     u32       1
//! tag_len     u32       byte length of the model tag
//! model_tag   tag_len   UTF-8
//! dimension   u32
//! count       u64
//! count × {
//!     key_len u32
//!     key     key_len   UTF-8 (instance id, or content hash for caches)
//!     values  dimension × f32
//! }
//! ```

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;
use std::time::Duration;

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::retry::{RetryPolicy, TransportError};

const MAGIC: &[u8; 4] = b"BAVS";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("zero vector for `{0}`")]
    ZeroVector(String),
    #[error("non-finite component in vector for `{0}`")]
    NonFinite(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("model mismatch: store holds `{store}`, vector is from `{vector}`")]
    ModelMismatch { store: String, vector: String },
    #[error("duplicate id `{0}` in vector store")]
    DuplicateId(String),
    #[error("vector store is empty after exclusions")]
    EmptyStore,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(TransportError),
    #[error("embedding backend returned {actual} vectors for {expected} texts")]
    CountMismatch { expected: usize, actual: usize },
    #[error("vector file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A vector tagged with the instance it embeds and the model that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub id: String,
    pub model_tag: String,
    values: Vec<f32>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(
        id: impl Into<String>,
        model_tag: impl Into<String>,
        values: Vec<f32>,
    ) -> Result<Self, EmbedError> {
        let id = id.into();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(id));
        }
        let norm = dot(&values, &values).sqrt();
        if norm == 0.0 {
            return Err(EmbedError::ZeroVector(id));
        }
        Ok(Self {
            id,
            model_tag: model_tag.into(),
            values,
            norm,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity using the cached norms.
    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64, EmbedError> {
        if self.dimension() != other.dimension() {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dimension(),
                actual: other.dimension(),
            });
        }
        Ok(clamp_unit(dot(&self.values, &other.values) / (self.norm * other.norm)))
    }
}

fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// `dot(u,v) / (|u| |v|)` accumulated in f64 and clamped to `[-1, 1]`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbedError::ZeroVector(String::new()));
    }
    Ok(clamp_unit(dot(u, v) / (nu * nv)))
}

/// Exact nearest-neighbour store for one embedding model.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    model_tag: String,
    dimension: Option<usize>,
    entries: BTreeMap<String, EmbeddingVector>,
}

impl VectorStore {
    pub fn new(model_tag: impl Into<String>) -> Self {
        Self {
            model_tag: model_tag.into(),
            dimension: None,
            entries: BTreeMap::new(),
        }
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &EmbeddingVector> {
        self.entries.values()
    }

    fn check(&self, vector: &EmbeddingVector) -> Result<(), EmbedError> {
        if vector.model_tag != self.model_tag {
            return Err(EmbedError::ModelMismatch {
                store: self.model_tag.clone(),
                vector: vector.model_tag.clone(),
            });
        }
        match self.dimension {
            Some(d) if d != vector.dimension() => Err(EmbedError::DimensionMismatch {
                expected: d,
                actual: vector.dimension(),
            }),
            _ => Ok(()),
        }
    }

    pub fn insert(&mut self, vector: EmbeddingVector) -> Result<(), EmbedError> {
        self.check(&vector)?;
        if self.entries.contains_key(&vector.id) {
            return Err(EmbedError::DuplicateId(vector.id));
        }
        self.dimension = Some(vector.dimension());
        self.entries.insert(vector.id.clone(), vector);
        Ok(())
    }

    /// Inserts or replaces.
    pub fn upsert(&mut self, vector: EmbeddingVector) -> Result<(), EmbedError> {
        self.check(&vector)?;
        self.dimension = Some(vector.dimension());
        self.entries.insert(vector.id.clone(), vector);
        Ok(())
    }

    /// A new store holding only the listed ids that are present here.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> VectorStore {
        let mut out = VectorStore::new(self.model_tag.clone());
        out.dimension = self.dimension;
        for id in ids {
            if let Some(v) = self.entries.get(id) {
                out.entries.insert(id.to_string(), v.clone());
            }
        }
        out
    }

    /// The `k` most similar entries, best first; ties go to the smaller id.
    pub fn top_k(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude: &HashSet<String>,
    ) -> Result<Vec<(String, f64)>, EmbedError> {
        if k == 0 {
            return Err(EmbedError::InvalidK);
        }
        if query.model_tag != self.model_tag {
            return Err(EmbedError::ModelMismatch {
                store: self.model_tag.clone(),
                vector: query.model_tag.clone(),
            });
        }
        let mut scored = self
            .entries
            .values()
            .filter(|v| !exclude.contains(&v.id))
            .map(|v| Ok((v.id.as_str(), query.cosine(v)?)))
            .collect::<Result<Vec<_>, EmbedError>>()?;
        if scored.is_empty() {
            return Err(EmbedError::EmptyStore);
        }
        // BTreeMap iteration is already id-ordered, so a stable sort on score keeps ties by id.
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(id, s)| (id.to_string(), s))
            .collect())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), EmbedError> {
        let dimension = self.dimension.unwrap_or(0);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_str(&mut w, &self.model_tag)?;
        w.write_all(&(dimension as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (key, vector) in &self.entries {
            write_str(&mut w, key)?;
            for v in &vector.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, EmbedError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(EmbedError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(EmbedError::Format(format!("unsupported version {version}")));
        }
        let model_tag = read_str(&mut r)?;
        let dimension = read_u32(&mut r)? as usize;
        let mut count_bytes = [0u8; 8];
        r.read_exact(&mut count_bytes)?;
        let count = u64::from_le_bytes(count_bytes);
        let mut store = VectorStore::new(model_tag.clone());
        let mut buf = vec![0u8; dimension * 4];
        for _ in 0..count {
            let key = read_str(&mut r)?;
            r.read_exact(&mut buf)?;
            let values = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(EmbeddingVector::new(key, model_tag.clone(), values)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32, EmbedError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String, EmbedError> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| EmbedError::Format(e.to_string()))
}

/// Cache key for a text: hex SHA-256 of its UTF-8 bytes.
pub fn content_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Where and how to reach an embedding service.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingServiceConfig {
    pub endpoint: String,
    pub model: String,
    /// Request body; the strings `{{texts}}` and `{{model}}` are substituted.
    #[serde(default = "default_request_template")]
    pub request_template: Value,
    /// JSON pointer to the array of results in the response.
    #[serde(default = "default_response_pointer")]
    pub response_pointer: String,
    /// Field of each result holding the vector; `None` when results are bare arrays.
    #[serde(default = "default_item_field")]
    pub item_field: Option<String>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Environment variable holding a bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

fn default_request_template() -> Value {
    serde_json::json!({ "model": "{{model}}", "input": "{{texts}}" })
}
fn default_response_pointer() -> String {
    "/data".into()
}
fn default_item_field() -> Option<String> {
    Some("embedding".into())
}
fn default_batch_size() -> usize {
    32
}
fn default_inflight() -> usize {
    4
}
fn default_timeout_ms() -> u64 {
    30_000
}

impl EmbeddingServiceConfig {
    /// OpenAI-compatible defaults for `endpoint` and `model`.
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            request_template: default_request_template(),
            response_pointer: default_response_pointer(),
            item_field: default_item_field(),
            batch_size: default_batch_size(),
            max_inflight: default_inflight(),
            timeout_ms: default_timeout_ms(),
            retry: RetryPolicy::default(),
            api_key_env: None,
        }
    }
}

pub(crate) fn fill_template(template: &Value, vars: &[(&str, Value)]) -> Value {
    match template {
        Value::String(s) => vars
            .iter()
            .find(|(name, _)| s == &format!("{{{{{name}}}}}"))
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| Value::String(s.clone())),
        Value::Array(items) => Value::Array(items.iter().map(|t| fill_template(t, vars)).collect()),
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| (k.clone(), fill_template(v, vars)))
                .collect(),
        ),
        other => other.clone(),
    }
}

/// Anything that turns a batch of texts into same-order vectors.
pub trait EmbeddingBackend: Send + Sync {
    fn model_tag(&self) -> &str;

    fn embed(
        &self,
        texts: &[String],
    ) -> impl std::future::Future<Output = Result<Vec<Vec<f32>>, TransportError>> + Send;
}

pub struct HttpEmbeddingBackend {
    config: EmbeddingServiceConfig,
    client: reqwest::Client,
}

impl HttpEmbeddingBackend {
    pub fn new(config: EmbeddingServiceConfig) -> Result<Self, TransportError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| TransportError::Unavailable(e.to_string()))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &EmbeddingServiceConfig {
        &self.config
    }

    fn parse_response(&self, body: &Value, expected: usize) -> Result<Vec<Vec<f32>>, TransportError> {
        let items = body
            .pointer(&self.config.response_pointer)
            .and_then(Value::as_array)
            .ok_or_else(|| {
                TransportError::BadResponse(format!(
                    "no array at `{}`",
                    self.config.response_pointer
                ))
            })?;
        if items.len() != expected {
            return Err(TransportError::BadResponse(format!(
                "{} vectors for {expected} texts",
                items.len()
            )));
        }
        items
            .iter()
            .map(|item| {
                let arr = match &self.config.item_field {
                    Some(field) => item.get(field),
                    None => Some(item),
                }
                .and_then(Value::as_array)
                .ok_or_else(|| TransportError::BadResponse("result is not a vector".into()))?;
                arr.iter()
                    .map(|x| {
                        x.as_f64()
                            .map(|f| f as f32)
                            .ok_or_else(|| TransportError::BadResponse("non-numeric component".into()))
                    })
                    .collect()
            })
            .collect()
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn model_tag(&self) -> &str {
        &self.config.model
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, TransportError> {
        let body = fill_template(
            &self.config.request_template,
            &[
                ("texts", Value::from(texts.to_vec())),
                ("model", Value::from(self.config.model.clone())),
            ],
        );
        let key = self
            .config
            .api_key_env
            .as_ref()
            .and_then(|name| std::env::var(name).ok());
        self.config
            .retry
            .run(|_| async {
                let mut req = self.client.post(&self.config.endpoint).json(&body);
                if let Some(key) = &key {
                    req = req.bearer_auth(key);
                }
                let resp = req.send().await?;
                let status = resp.status();
                if !status.is_success() {
                    let text = resp.text().await.unwrap_or_default();
                    return Err(TransportError::from_status(status.as_u16(), text));
                }
                let value: Value = resp.json().await?;
                self.parse_response(&value, texts.len())
            })
            .await
    }
}

/// A batch of `(key, text)` pairs with their vectors.
type EmbeddedChunk = (Vec<(String, String)>, Vec<Vec<f32>>);

/// Embeds texts through a backend, writing through a content-keyed cache.
pub struct Embedder<B> {
    backend: B,
    cache: VectorStore,
    batch_size: usize,
    max_inflight: usize,
}

impl<B: EmbeddingBackend> Embedder<B> {
    pub fn new(backend: B, batch_size: usize, max_inflight: usize) -> Self {
        let cache = VectorStore::new(backend.model_tag().to_string());
        Self {
            backend,
            cache,
            batch_size: batch_size.max(1),
            max_inflight: max_inflight.max(1),
        }
    }

    /// Reuses a previously persisted cache; it must come from the same model.
    pub fn with_cache(mut self, cache: VectorStore) -> Result<Self, EmbedError> {
        if cache.model_tag() != self.backend.model_tag() {
            return Err(EmbedError::ModelMismatch {
                store: cache.model_tag().to_string(),
                vector: self.backend.model_tag().to_string(),
            });
        }
        self.cache = cache;
        Ok(self)
    }

    pub fn model_tag(&self) -> &str {
        self.backend.model_tag()
    }

    pub fn cache(&self) -> &VectorStore {
        &self.cache
    }

    pub fn into_cache(self) -> VectorStore {
        self.cache
    }

    /// One vector per `(id, text)` input, in input order.
    pub async fn embed_batch(
        &mut self,
        texts: &[(String, String)],
    ) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let keys: Vec<String> = texts.iter().map(|(_, t)| content_key(t)).collect();
        let mut pending: Vec<(String, String)> = Vec::new();
        let mut queued = HashSet::new();
        for ((_, text), key) in texts.iter().zip(&keys) {
            if !self.cache.contains(key) && queued.insert(key.clone()) {
                pending.push((key.clone(), text.clone()));
            }
        }

        let backend = &self.backend;
        let chunks: Vec<Vec<(String, String)>> =
            pending.chunks(self.batch_size).map(<[_]>::to_vec).collect();
        let results: Vec<EmbeddedChunk> = stream::iter(chunks)
            .map(|chunk| async move {
                let batch: Vec<String> = chunk.iter().map(|(_, t)| t.clone()).collect();
                let vectors = backend
                    .embed(&batch)
                    .await
                    .map_err(EmbedError::BackendUnavailable)?;
                if vectors.len() != chunk.len() {
                    return Err(EmbedError::CountMismatch {
                        expected: chunk.len(),
                        actual: vectors.len(),
                    });
                }
                Ok((chunk, vectors))
            })
            .buffered(self.max_inflight)
            .try_collect()
            .await?;

        let tag = self.backend.model_tag().to_string();
        for (chunk, vectors) in results {
            for ((key, _), values) in chunk.into_iter().zip(vectors) {
                self.cache
                    .insert(EmbeddingVector::new(key, tag.clone(), values)?)?;
            }
        }

        texts
            .iter()
            .zip(&keys)
            .map(|((id, _), key)| {
                let cached = self.cache.get(key).expect("filled above");
                Ok(EmbeddingVector {
                    id: id.clone(),
                    model_tag: tag.clone(),
                    values: cached.values.clone(),
                    norm: cached.norm,
                })
            })
            .collect()
    }

    /// Embeds and collects the results into an id-keyed store.
    pub async fn embed_store(
        &mut self,
        texts: &[(String, String)],
    ) -> Result<VectorStore, EmbedError> {
        let mut store = VectorStore::new(self.model_tag().to_string());
        for v in self.embed_batch(texts).await? {
            store.upsert(v)?;
        }
        Ok(store)
    }
}

/// Id → vector map bundled from several stores of the same model.
pub fn merge_stores(stores: impl IntoIterator<Item = VectorStore>) -> Result<Option<VectorStore>, EmbedError> {
    let mut merged: Option<VectorStore> = None;
    for store in stores {
        match merged.as_mut() {
            None => merged = Some(store),
            Some(m) => {
                for v in store.entries.into_values() {
                    m.upsert(v)?;
                }
            }
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn v(id: &str, values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(id, "m", values.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(EmbedError::ZeroVector(_))));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(EmbedError::DimensionMismatch { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn zero_and_nan_vectors_rejected() {
        assert!(matches!(
            EmbeddingVector::new("z", "m", vec![0.0, 0.0]),
            Err(EmbedError::ZeroVector(_))
        ));
        assert!(matches!(
            EmbeddingVector::new("n", "m", vec![f32::NAN, 1.0]),
            Err(EmbedError::NonFinite(_))
        ));
    }

    fn small_store() -> VectorStore {
        let mut s = VectorStore::new("m");
        s.insert(v("a", &[1.0, 0.0])).unwrap();
        s.insert(v("b", &[0.0, 1.0])).unwrap();
        s.insert(v("c", &[0.9, 0.1])).unwrap();
        s
    }

    #[test]
    fn top_k_examples() {
        let s = small_store();
        let q = v("q", &[1.0, 0.0]);
        let top = s.top_k(&q, 2, &HashSet::new()).unwrap();
        assert_eq!(top[0], ("a".to_string(), 1.0));
        assert_eq!(top[1].0, "c");
        // 0.9 / sqrt(0.82)
        assert!((top[1].1 - 0.993_883_734_673_619_6).abs() < 1e-6);

        let all = s.top_k(&q, 10, &HashSet::new()).unwrap();
        assert_eq!(all.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["a", "c", "b"]);

        let ex: HashSet<String> = ["a".to_string()].into();
        let top = s.top_k(&q, 1, &ex).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].0, "c");

        let everything: HashSet<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(s.top_k(&q, 1, &everything), Err(EmbedError::EmptyStore)));
        assert!(matches!(s.top_k(&q, 0, &HashSet::new()), Err(EmbedError::InvalidK)));
    }

    #[test]
    fn ties_prefer_smaller_id() {
        let mut s = VectorStore::new("m");
        s.insert(v("z", &[1.0, 0.0])).unwrap();
        s.insert(v("b", &[2.0, 0.0])).unwrap();
        s.insert(v("m", &[3.0, 0.0])).unwrap();
        let top = s.top_k(&v("q", &[1.0, 0.0]), 3, &HashSet::new()).unwrap();
        assert_eq!(top.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["b", "m", "z"]);
    }

    #[test]
    fn store_refuses_mixing() {
        let mut s = small_store();
        assert!(matches!(
            s.insert(v("d", &[1.0, 0.0, 0.0])),
            Err(EmbedError::DimensionMismatch { .. })
        ));
        let other = EmbeddingVector::new("e", "other-model", vec![1.0, 0.0]).unwrap();
        assert!(matches!(s.insert(other.clone()), Err(EmbedError::ModelMismatch { .. })));
        assert!(matches!(
            s.top_k(&other, 1, &HashSet::new()),
            Err(EmbedError::ModelMismatch { .. })
        ));
        assert!(matches!(s.insert(v("a", &[1.0, 1.0])), Err(EmbedError::DuplicateId(_))));
    }

    #[test]
    fn persistence_roundtrip_is_bit_exact() {
        let s = small_store();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"BAVS");
        let back = VectorStore::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, s);
        let q = v("q", &[0.3, 0.7]);
        let a = s.top_k(&q, 3, &HashSet::new()).unwrap();
        let b = back.top_k(&q, 3, &HashSet::new()).unwrap();
        assert_eq!(a, b);
        assert!(VectorStore::read_from(&b"NOPE"[..]).is_err());
    }

    #[test]
    fn template_substitution() {
        let t = serde_json::json!({"model": "{{model}}", "input": "{{texts}}", "keep": ["x", 1]});
        let filled = fill_template(
            &t,
            &[("texts", serde_json::json!(["a", "b"])), ("model", serde_json::json!("bge"))],
        );
        assert_eq!(filled, serde_json::json!({"model": "bge", "input": ["a", "b"], "keep": ["x", 1]}));
    }

    struct CountingBackend {
        calls: AtomicUsize,
        texts: AtomicUsize,
        dim: usize,
    }

    impl EmbeddingBackend for CountingBackend {
        fn model_tag(&self) -> &str {
            "count"
        }
        async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.texts.fetch_add(texts.len(), Ordering::SeqCst);
            Ok(texts
                .iter()
                .map(|t| {
                    let mut v = vec![0.1f32; self.dim];
                    v[0] += t.len() as f32;
                    v
                })
                .collect())
        }
    }

    #[tokio::test]
    async fn cache_serves_repeat_requests() {
        let backend = CountingBackend { calls: 0.into(), texts: 0.into(), dim: 4 };
        let mut e = Embedder::new(backend, 1, 2);
        let input = vec![
            ("i1".to_string(), "hello".to_string()),
            ("i2".to_string(), "world!".to_string()),
        ];
        let first = e.embed_batch(&input).await.unwrap();
        assert_eq!(first.len(), 2);
        assert_eq!(first[0].id, "i1");
        assert_eq!(e.cache().len(), 2);
        assert_eq!(e.backend.calls.load(Ordering::SeqCst), 2);

        let again = e.embed_batch(&input).await.unwrap();
        assert_eq!(again, first);
        assert_eq!(e.backend.calls.load(Ordering::SeqCst), 2);
    }

    #[tokio::test]
    async fn duplicate_texts_are_embedded_once() {
        let backend = CountingBackend { calls: 0.into(), texts: 0.into(), dim: 3 };
        let mut e = Embedder::new(backend, 8, 1);
        let input = vec![
            ("a".to_string(), "same".to_string()),
            ("b".to_string(), "same".to_string()),
        ];
        let out = e.embed_batch(&input).await.unwrap();
        assert_eq!(out[0].values(), out[1].values());
        assert_eq!(e.backend.texts.load(Ordering::SeqCst), 1);
    }

    #[tokio::test]
    async fn wrong_dimension_against_existing_cache() {
        let mut cache = VectorStore::new("count");
        cache
            .insert(EmbeddingVector::new(content_key("old"), "count", vec![1.0, 2.0]).unwrap())
            .unwrap();
        let backend = CountingBackend { calls: 0.into(), texts: 0.into(), dim: 5 };
        let mut e = Embedder::new(backend, 4, 1).with_cache(cache).unwrap();
        let err = e
            .embed_batch(&[("x".to_string(), "new text".to_string())])
            .await
            .unwrap_err();
        assert!(matches!(err, EmbedError::DimensionMismatch { expected: 2, actual: 5 }));
    }
}
