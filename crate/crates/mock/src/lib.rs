//! A deterministic stand-in for chat-completion and embedding services.
//!
//! Chat answers are looked up by the text that follows the target marker
//! in the last user message. Embeddings are signed hashed bags of words.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use biasaudit::corpus::Instance;
use biasaudit::promptdetect::TARGET_MARKER;
use biasaudit::synthetic::NoisyDetector;
use biasaudit::LabelSet;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub enum AnswerMode {
    /// The gold codes of the target text, `S10` for unknown texts.
    Perfect,
    /// Gold codes corrupted by a keyed noisy detector.
    Noisy(NoisyDetector),
    /// The same reply to every request.
    Fixed(String),
}

#[derive(Debug, Clone)]
pub struct MockConfig {
    pub mode: AnswerMode,
    /// Target text → gold labels.
    pub answers: HashMap<String, LabelSet>,
    /// The first `fail_first` chat requests get `fail_status`.
    pub fail_first: u64,
    pub fail_status: u16,
    pub delay: Duration,
    pub embedding_dim: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            mode: AnswerMode::Perfect,
            answers: HashMap::new(),
            fail_first: 0,
            fail_status: 503,
            delay: Duration::ZERO,
            embedding_dim: 64,
        }
    }
}

impl MockConfig {
    pub fn with_answers<'a>(mut self, instances: impl IntoIterator<Item = &'a Instance>) -> Self {
        self.answers
            .extend(instances.into_iter().map(|i| (i.text.clone(), i.gold)));
        self
    }
}

#[derive(Debug, Default)]
pub struct Counters {
    pub chat_requests: AtomicU64,
    pub embedding_requests: AtomicU64,
    pub embedded_texts: AtomicU64,
}

impl Counters {
    pub fn chat(&self) -> u64 {
        self.chat_requests.load(Ordering::SeqCst)
    }
    pub fn embeddings(&self) -> u64 {
        self.embedding_requests.load(Ordering::SeqCst)
    }
}

struct AppState {
    config: MockConfig,
    counters: Arc<Counters>,
}

pub fn router(config: MockConfig, counters: Arc<Counters>) -> Router {
    let state = Arc::new(AppState { config, counters });
    Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/v1/embeddings", post(embeddings))
        .route("/stats", get(stats))
        .with_state(state)
}

/// Serves on `addr` in a background task and returns the bound address.
pub async fn spawn(config: MockConfig, addr: SocketAddr) -> std::io::Result<(SocketAddr, Arc<Counters>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let counters = Arc::new(Counters::default());
    let app = router(config, counters.clone());
    tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!("mock server stopped: {e}");
        }
    });
    Ok((local, counters))
}

/// The text after the target marker in the last user message.
pub fn target_text(body: &Value) -> Option<String> {
    let messages = body.get("messages")?.as_array()?;
    let user = messages
        .iter()
        .rev()
        .find(|m| m.get("role").and_then(Value::as_str) == Some("user"))?;
    let content = user.get("content")?.as_str()?;
    let at = content.rfind(TARGET_MARKER)?;
    Some(content[at + TARGET_MARKER.len()..].trim().to_string())
}

fn answer(config: &MockConfig, text: &str) -> String {
    let gold = config.answers.get(text).copied().unwrap_or(LabelSet::EMPTY);
    match &config.mode {
        AnswerMode::Perfect => format!("Answer: {}", gold.policy_codes()),
        AnswerMode::Noisy(d) => format!("Answer: {}", d.predict(text, gold).policy_codes()),
        AnswerMode::Fixed(s) => s.clone(),
    }
}

async fn chat(State(state): State<Arc<AppState>>, Json(body): Json<Value>) -> Response {
    let n = state.counters.chat_requests.fetch_add(1, Ordering::SeqCst);
    if !state.config.delay.is_zero() {
        tokio::time::sleep(state.config.delay).await;
    }
    if n < state.config.fail_first {
        let status = StatusCode::from_u16(state.config.fail_status).unwrap_or(StatusCode::SERVICE_UNAVAILABLE);
        return (status, "mock failure").into_response();
    }
    let Some(text) = target_text(&body) else {
        return (StatusCode::BAD_REQUEST, "no target text in request").into_response();
    };
    let model = body.get("model").cloned().unwrap_or(Value::Null);
    Json(json!({
        "id": format!("mock-{n}"),
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": answer(&state.config, &text)},
            "finish_reason": "stop"
        }]
    }))
    .into_response()
}

/// Signed hashed bag of lowercase alphanumeric tokens, never all-zero.
pub fn hashed_embedding(text: &str, dim: usize) -> Vec<f32> {
    let mut v = vec![0f32; dim.max(1)];
    for token in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let h = Sha256::digest(token.to_lowercase().as_bytes());
        let idx = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as usize % v.len();
        v[idx] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
    }
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    v
}

async fn embeddings(State(state): State<Arc<AppState>>, Json(body): Json<Value>) -> Response {
    state.counters.embedding_requests.fetch_add(1, Ordering::SeqCst);
    let texts: Vec<String> = match body.get("input") {
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(items)) => items.iter().filter_map(|t| t.as_str().map(str::to_string)).collect(),
        _ => return (StatusCode::BAD_REQUEST, "missing input").into_response(),
    };
    state
        .counters
        .embedded_texts
        .fetch_add(texts.len() as u64, Ordering::SeqCst);
    let data: Vec<Value> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| json!({"index": i, "embedding": hashed_embedding(t, state.config.embedding_dim)}))
        .collect();
    Json(json!({"object": "list", "model": body.get("model"), "data": data})).into_response()
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<Value> {
    let c = &state.counters;
    Json(json!({
        "chat_requests": c.chat(),
        "embedding_requests": c.embeddings(),
        "embedded_texts": c.embedded_texts.load(Ordering::SeqCst),
    }))
}
