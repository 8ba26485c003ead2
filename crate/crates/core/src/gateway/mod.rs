//! Uniform chat-completion and embedding interface.
//!
//! Backends implement [`LlmBackend`]. [`Llm`] binds a backend to a model id,
//! bounds the number of in-flight calls and records every non-cached call in a
//! shared [`CallLedger`].

mod cache;
mod remote;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheRecord, CacheStore, CachingBackend};
pub use remote::{RemoteBackend, RemoteConfig, RetryPolicy};
pub use scripted::{write_script, MatchKind, ScriptEntry, ScriptMatch, ScriptedBackend};

pub const SOLVER_MAX_TOKENS: u32 = 1024;
pub const EXPERT_MAX_TOKENS: u32 = 2048;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("remote error {status}: {body}")]
    Remote { status: u16, body: String },
    #[error("no scripted response for request (last user message: {0:?})")]
    Unscripted(String),
    #[error("offline mode: request {0} is not in the cache")]
    Offline(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::System => "system",
            Self::User => "user",
            Self::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// What a call is for. Only used for accounting; never part of the cache key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purpose {
    Solver,
    ExpertFeedback,
    ExpertCombine,
    ExpertCluster,
    ExpertEdit,
    ExpertParaphrase,
    Embed,
}

impl Purpose {
    pub const ALL: [Purpose; 7] = [
        Purpose::Solver,
        Purpose::ExpertFeedback,
        Purpose::ExpertCombine,
        Purpose::ExpertCluster,
        Purpose::ExpertEdit,
        Purpose::ExpertParaphrase,
        Purpose::Embed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Solver => "solver",
            Self::ExpertFeedback => "expert-feedback",
            Self::ExpertCombine => "expert-combine",
            Self::ExpertCluster => "expert-cluster",
            Self::ExpertEdit => "expert-edit",
            Self::ExpertParaphrase => "expert-paraphrase",
            Self::Embed => "embed",
        }
    }

    pub fn default_max_tokens(self) -> u32 {
        match self {
            Self::Solver => SOLVER_MAX_TOKENS,
            _ => EXPERT_MAX_TOKENS,
        }
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub purpose: Purpose,
}

impl ChatRequest {
    /// Temperature 0 and the purpose's default token limit.
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>, purpose: Purpose) -> Self {
        Self {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            max_output_tokens: purpose.default_max_tokens(),
            purpose,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        if let Some(m) = self.messages.iter().find(|m| m.content.is_empty() && m.role != Role::Assistant) {
            return Err(GatewayError::InvalidRequest(format!("empty {} message", m.role.as_str())));
        }
        Ok(())
    }

    pub fn last_user_message(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
    }

    /// Canonical JSON form stored alongside cache records.
    pub fn canonical_json(&self) -> serde_json::Value {
        serde_json::json!({
            "model_id": self.model_id,
            "messages": self.messages,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub from_cache: bool,
}

/// 256-bit digest identifying a request, hex encoded.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(pub String);

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn put_field(hasher: &mut Sha256, bytes: &[u8]) {
    hasher.update((bytes.len() as u64).to_be_bytes());
    hasher.update(bytes);
}

/// SHA-256 over length-prefixed fields: model id, message count, each
/// message's role and content, temperature bits, max tokens. The purpose
/// tag is not hashed.
pub fn cache_key(request: &ChatRequest) -> CacheKey {
    let mut h = Sha256::new();
    put_field(&mut h, b"chat");
    put_field(&mut h, request.model_id.as_bytes());
    put_field(&mut h, &(request.messages.len() as u64).to_be_bytes());
    for m in &request.messages {
        put_field(&mut h, m.role.as_str().as_bytes());
        put_field(&mut h, m.content.as_bytes());
    }
    put_field(&mut h, &request.temperature.to_bits().to_be_bytes());
    put_field(&mut h, &u64::from(request.max_output_tokens).to_be_bytes());
    CacheKey(hex::encode(h.finalize()))
}

pub fn embed_cache_key(model_id: &str, texts: &[String]) -> CacheKey {
    let mut h = Sha256::new();
    put_field(&mut h, b"embed");
    put_field(&mut h, model_id.as_bytes());
    put_field(&mut h, &(texts.len() as u64).to_be_bytes());
    for t in texts {
        put_field(&mut h, t.as_bytes());
    }
    CacheKey(hex::encode(h.finalize()))
}

/// Result of an embedding call. `from_cache` mirrors [`ChatResponse`].
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub vectors: Vec<Vec<f64>>,
    pub from_cache: bool,
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Embeddings, GatewayError> {
        let _ = (model_id, texts);
        Err(GatewayError::InvalidRequest("backend has no embedding support".into()))
    }

    /// Number of calls that actually left the process (HTTP requests). Zero
    /// for in-process backends.
    fn network_requests(&self) -> u64 {
        0
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for Arc<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }

    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Embeddings, GatewayError> {
        (**self).embed(model_id, texts)
    }

    fn network_requests(&self) -> u64 {
        (**self).network_requests()
    }
}

/// Per-purpose count of backend calls that were not served from cache.
#[derive(Debug, Default)]
pub struct CallLedger {
    counts: Mutex<BTreeMap<Purpose, u64>>,
}

impl CallLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, purpose: Purpose) {
        *self.counts.lock().expect("ledger lock").entry(purpose).or_insert(0) += 1;
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot(self.counts.lock().expect("ledger lock").clone())
    }

    pub fn restore(&self, snapshot: &LedgerSnapshot) {
        *self.counts.lock().expect("ledger lock") = snapshot.0.clone();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LedgerSnapshot(pub BTreeMap<Purpose, u64>);

impl LedgerSnapshot {
    pub fn get(&self, purpose: Purpose) -> u64 {
        self.0.get(&purpose).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn plus(&self, other: &LedgerSnapshot) -> LedgerSnapshot {
        let mut out = self.clone();
        for (p, n) in &other.0 {
            *out.0.entry(*p).or_insert(0) += n;
        }
        out
    }

    /// `self - earlier`, per purpose.
    pub fn since(&self, earlier: &LedgerSnapshot) -> LedgerSnapshot {
        LedgerSnapshot(self.0.iter().map(|(p, n)| (*p, n - earlier.get(*p))).filter(|(_, n)| *n > 0).collect())
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
pub struct Limiter {
    capacity: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), in_use: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn acquire(&self) -> LimiterPermit<'_> {
        let mut n = self.in_use.lock().expect("limiter lock");
        while *n >= self.capacity {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        LimiterPermit(self)
    }
}

struct LimiterPermit<'a>(&'a Limiter);

impl Drop for LimiterPermit<'_> {
    fn drop(&mut self) {
        *self.0.in_use.lock().expect("limiter lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// A backend bound to one model id, sharing a ledger and an in-flight bound
/// with the other roles of the same run.
#[derive(Clone)]
pub struct Llm {
    backend: Arc<dyn LlmBackend>,
    model_id: String,
    ledger: Arc<CallLedger>,
    limiter: Arc<Limiter>,
}

impl fmt::Debug for Llm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Llm").field("model_id", &self.model_id).finish()
    }
}

impl Llm {
    pub fn new(
        backend: Arc<dyn LlmBackend>,
        model_id: impl Into<String>,
        ledger: Arc<CallLedger>,
        limiter: Arc<Limiter>,
    ) -> Self {
        Self { backend, model_id: model_id.into(), ledger, limiter }
    }

    /// Single-role convenience constructor with a private ledger.
    pub fn standalone(backend: impl LlmBackend + 'static, model_id: &str) -> Self {
        Self::new(
            Arc::new(backend),
            model_id,
            Arc::new(CallLedger::new()),
            Arc::new(Limiter::new(DEFAULT_MAX_IN_FLIGHT)),
        )
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn ledger(&self) -> &Arc<CallLedger> {
        &self.ledger
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.capacity()
    }

    pub fn backend(&self) -> &Arc<dyn LlmBackend> {
        &self.backend
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let response = {
            let _permit = self.limiter.acquire();
            self.backend.complete(request)?
        };
        if !response.from_cache {
            self.ledger.record(request.purpose);
        }
        Ok(response)
    }

    /// Builds a temperature-0 request for this model and sends it.
    pub fn chat(&self, purpose: Purpose, messages: Vec<ChatMessage>) -> Result<ChatResponse, GatewayError> {
        self.complete(&ChatRequest::new(self.model_id.clone(), messages, purpose))
    }

    /// Unit-normalized embeddings, one per input.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("nothing to embed".into()));
        }
        let out = {
            let _permit = self.limiter.acquire();
            self.backend.embed(&self.model_id, texts)?
        };
        if !out.from_cache {
            self.ledger.record(Purpose::Embed);
        }
        if out.vectors.len() != texts.len() {
            return Err(GatewayError::Decode(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                out.vectors.len()
            )));
        }
        let dim = out.vectors[0].len();
        out.vectors
            .into_iter()
            .map(|v| {
                if v.len() != dim {
                    return Err(GatewayError::Decode("embedding dimensions differ".into()));
                }
                normalize(v)
            })
            .collect()
    }
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>, GatewayError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(GatewayError::Decode("zero or non-finite embedding vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Rough whitespace token count for in-process backends.
pub(crate) fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
