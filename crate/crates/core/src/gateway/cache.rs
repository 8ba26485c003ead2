//! Response cache backed by an append-only JSONL file.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{cache_key, embed_cache_key, CacheKey, ChatRequest, ChatResponse, Embeddings, GatewayError, LlmBackend};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One line of the cache file. The last record for a key wins on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: CacheKey,
    pub request: serde_json::Value,
    pub response: CachedResponse,
    pub created_unix: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheStats {
    pub records: usize,
    pub keys: usize,
}

#[derive(Debug, Default)]
struct Inner {
    entries: HashMap<CacheKey, CachedResponse>,
    records: usize,
    file: Option<File>,
}

#[derive(Debug)]
pub struct CacheStore {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl CacheStore {
    pub fn in_memory() -> Self {
        Self { path: None, inner: Mutex::new(Inner::default()) }
    }

    /// Opens (creating if needed) a cache file and loads its records.
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).read(true).open(path)?;
        let mut inner = Inner::default();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            // a torn final line from a killed writer is skipped
            let rec: CacheRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("{}:{}: skipping unreadable cache record: {e}", path.display(), i + 1);
                    continue;
                }
            };
            inner.entries.insert(rec.key, rec.response);
            inner.records += 1;
        }
        inner.file = Some(file);
        Ok(Self { path: Some(path.to_path_buf()), inner: Mutex::new(inner) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &CacheKey) -> Option<CachedResponse> {
        self.inner.lock().expect("cache lock").entries.get(key).cloned()
    }

    pub fn insert(
        &self,
        key: CacheKey,
        request: serde_json::Value,
        response: CachedResponse,
    ) -> Result<(), GatewayError> {
        let mut inner = self.inner.lock().expect("cache lock");
        if let Some(file) = inner.file.as_mut() {
            let rec = CacheRecord {
                key: key.clone(),
                request,
                response: response.clone(),
                created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            };
            let mut line = serde_json::to_vec(&rec).map_err(|e| GatewayError::Decode(e.to_string()))?;
            line.push(b'\n');
            // other processes may share the file; one locked write per record
            file.lock()?;
            let written = file.write_all(&line).and_then(|_| file.flush());
            file.unlock()?;
            written?;
        }
        inner.entries.insert(key, response);
        inner.records += 1;
        Ok(())
    }

    pub fn stats(&self) -> CacheStats {
        let inner = self.inner.lock().expect("cache lock");
        CacheStats { records: inner.records, keys: inner.entries.len() }
    }

    /// Drops every record, truncating the backing file.
    pub fn purge(&self) -> Result<(), GatewayError> {
        let mut inner = self.inner.lock().expect("cache lock");
        if let Some(path) = &self.path {
            let f = OpenOptions::new().write(true).open(path)?;
            f.lock()?;
            f.set_len(0)?;
            f.unlock()?;
        }
        inner.entries.clear();
        inner.records = 0;
        Ok(())
    }
}

/// Serves repeated requests from a [`CacheStore`]; in offline mode a miss is
/// an error instead of a backend call.
pub struct CachingBackend<B> {
    inner: B,
    store: std::sync::Arc<CacheStore>,
    offline: bool,
}

impl<B: LlmBackend> CachingBackend<B> {
    pub fn new(inner: B, store: std::sync::Arc<CacheStore>) -> Self {
        Self { inner, store, offline: false }
    }

    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        self
    }

    pub fn store(&self) -> &std::sync::Arc<CacheStore> {
        &self.store
    }
}

impl<B: LlmBackend> LlmBackend for CachingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = cache_key(request);
        if let Some(hit) = self.store.get(&key) {
            return Ok(ChatResponse {
                text: hit.text,
                prompt_tokens: hit.prompt_tokens,
                completion_tokens: hit.completion_tokens,
                from_cache: true,
            });
        }
        if self.offline {
            return Err(GatewayError::Offline(key.0));
        }
        let resp = self.inner.complete(request)?;
        self.store.insert(
            key,
            request.canonical_json(),
            CachedResponse {
                text: resp.text.clone(),
                prompt_tokens: resp.prompt_tokens,
                completion_tokens: resp.completion_tokens,
            },
        )?;
        Ok(ChatResponse { from_cache: false, ..resp })
    }

    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Embeddings, GatewayError> {
        let key = embed_cache_key(model_id, texts);
        if let Some(hit) = self.store.get(&key) {
            let vectors = serde_json::from_str(&hit.text).map_err(|e| GatewayError::Decode(e.to_string()))?;
            return Ok(Embeddings { vectors, from_cache: true });
        }
        if self.offline {
            return Err(GatewayError::Offline(key.0));
        }
        let out = self.inner.embed(model_id, texts)?;
        let text = serde_json::to_string(&out.vectors).map_err(|e| GatewayError::Decode(e.to_string()))?;
        self.store.insert(
            key,
            serde_json::json!({ "model_id": model_id, "inputs": texts }),
            CachedResponse { text, prompt_tokens: 0, completion_tokens: 0 },
        )?;
        Ok(Embeddings { from_cache: false, ..out })
    }

    fn network_requests(&self) -> u64 {
        self.inner.network_requests()
    }
}
