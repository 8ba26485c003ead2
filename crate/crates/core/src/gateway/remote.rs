//! OpenAI-compatible HTTP backend (`/chat/completions`, `/embeddings`).

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rand::Rng;
use serde::Deserialize;
use serde_json::json;

use super::{ChatRequest, ChatResponse, Embeddings, GatewayError, LlmBackend};

/// Exponential backoff with full jitter. Attempt `k` (0-based) sleeps a
/// uniform duration in `[0, base_delay * 2^k]` before retrying.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        let cap = self.base_delay.saturating_mul(1u32 << attempt.min(16));
        if cap.is_zero() {
            return cap;
        }
        let secs = rand::rng().random_range(0.0..=cap.as_secs_f64());
        Duration::from_secs_f64(secs)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    /// Separate endpoint for embeddings, if any.
    pub embed_base_url: Option<String>,
    pub embed_api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            embed_base_url: None,
            embed_api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads `FACETFORGE_BASE_URL`, `FACETFORGE_API_KEY` and the optional
    /// embedding overrides.
    pub fn from_env() -> Option<Self> {
        let base = std::env::var("FACETFORGE_BASE_URL").ok()?;
        let mut cfg = Self::new(base);
        cfg.api_key = std::env::var("FACETFORGE_API_KEY").ok();
        cfg.embed_base_url = std::env::var("FACETFORGE_EMBED_BASE_URL").ok();
        cfg.embed_api_key = std::env::var("FACETFORGE_EMBED_API_KEY").ok();
        Some(cfg)
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    requests: AtomicU64,
}

enum Attempt {
    Done(String),
    Retryable(GatewayError),
    Fatal(GatewayError),
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbeddingBody {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent, requests: AtomicU64::new(0) }
    }

    fn attempt(&self, url: &str, key: Option<&str>, body: &serde_json::Value) -> Attempt {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(k) = key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        match req.send_json(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = match resp.body_mut().read_to_string() {
                    Ok(t) => t,
                    Err(e) => return Attempt::Retryable(GatewayError::Transport(e.to_string())),
                };
                match status {
                    200..=299 => Attempt::Done(text),
                    429 | 500..=599 => Attempt::Retryable(GatewayError::Remote { status, body: text }),
                    _ => Attempt::Fatal(GatewayError::Remote { status, body: text }),
                }
            }
            Err(e) => Attempt::Retryable(GatewayError::Transport(e.to_string())),
        }
    }

    fn post(&self, url: &str, key: Option<&str>, body: &serde_json::Value) -> Result<String, GatewayError> {
        let policy = self.config.retry;
        let mut last = GatewayError::Transport("no attempt made".into());
        for attempt in 0..policy.max_attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(policy.backoff(attempt - 1));
            }
            match self.attempt(url, key, body) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retryable(e) => {
                    log::warn!("{url}: attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(last)
    }
}

fn endpoint(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

impl LlmBackend for RemoteBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let body = json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        let url = endpoint(&self.config.base_url, "chat/completions");
        let text = self.post(&url, self.config.api_key.as_deref(), &body)?;
        let parsed: CompletionBody =
            serde_json::from_str(&text).map_err(|e| GatewayError::Decode(format!("{e}: {text}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::Decode("response has no choices".into()))?;
        let usage = parsed.usage.unwrap_or_default();
        Ok(ChatResponse {
            text: content,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            from_cache: false,
        })
    }

    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Embeddings, GatewayError> {
        let base = self.config.embed_base_url.as_deref().unwrap_or(&self.config.base_url);
        let key = self.config.embed_api_key.as_deref().or(self.config.api_key.as_deref());
        let body = json!({ "model": model_id, "input": texts });
        let text = self.post(&endpoint(base, "embeddings"), key, &body)?;
        let mut parsed: EmbeddingBody =
            serde_json::from_str(&text).map_err(|e| GatewayError::Decode(format!("{e}: {text}")))?;
        parsed.data.sort_by_key(|d| d.index);
        Ok(Embeddings { vectors: parsed.data.into_iter().map(|d| d.embedding).collect(), from_cache: false })
    }

    fn network_requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}
