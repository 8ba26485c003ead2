//! Deterministic in-process backend driven by a script.
//!
//! Matching order: exact cache-key entries first, then regex entries in file
//! order against the last user message. Regexes use `fancy_regex` syntax, so
//! look-ahead is available for "contains all of" rules.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use fancy_regex::Regex;
use serde::{Deserialize, Serialize};

use super::{approx_tokens, cache_key, ChatRequest, ChatResponse, Embeddings, GatewayError, LlmBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Exact,
    Regex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptMatch {
    pub kind: MatchKind,
    pub value: String,
}

/// One line of a script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: ScriptMatch,
    pub response: String,
}

impl ScriptEntry {
    pub fn exact(key: impl Into<String>, response: impl Into<String>) -> Self {
        Self { matcher: ScriptMatch { kind: MatchKind::Exact, value: key.into() }, response: response.into() }
    }

    pub fn regex(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self { matcher: ScriptMatch { kind: MatchKind::Regex, value: pattern.into() }, response: response.into() }
    }
}

pub fn write_script(path: &Path, entries: &[ScriptEntry]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

#[derive(Debug, Default)]
pub struct ScriptedBackend {
    exact: HashMap<String, String>,
    rules: Vec<(Regex, String)>,
    embeddings: HashMap<String, Vec<f64>>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, GatewayError> {
        let mut backend = Self::default();
        for e in entries {
            backend.push(e)?;
        }
        Ok(backend)
    }

    pub fn push(&mut self, entry: ScriptEntry) -> Result<(), GatewayError> {
        match entry.matcher.kind {
            MatchKind::Exact => {
                self.exact.insert(entry.matcher.value, entry.response);
            }
            MatchKind::Regex => {
                let re = Regex::new(&entry.matcher.value).map_err(|e| {
                    GatewayError::InvalidRequest(format!("bad script regex {:?}: {e}", entry.matcher.value))
                })?;
                self.rules.push((re, entry.response));
            }
        }
        Ok(())
    }

    /// Loads a JSONL script file.
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ScriptEntry = serde_json::from_str(&line)
                .map_err(|e| GatewayError::InvalidRequest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(e);
        }
        Self::new(entries)
    }

    /// Adds a fixed embedding for `text`.
    pub fn with_embedding(mut self, text: impl Into<String>, vector: Vec<f64>) -> Self {
        self.embeddings.insert(text.into(), vector);
        self
    }

    /// Loads embeddings from a JSON object `{"<text>": [..], ...}`.
    pub fn load_embeddings(mut self, path: &Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path)?;
        let map: HashMap<String, Vec<f64>> =
            serde_json::from_str(&raw).map_err(|e| GatewayError::Decode(e.to_string()))?;
        self.embeddings.extend(map);
        Ok(self)
    }

    fn lookup(&self, request: &ChatRequest) -> Result<&str, GatewayError> {
        if let Some(r) = self.exact.get(&cache_key(request).0) {
            return Ok(r);
        }
        let last = request.last_user_message().unwrap_or("");
        for (re, response) in &self.rules {
            // a regex that blows its backtrack limit is treated as a non-match
            if re.is_match(last).unwrap_or(false) {
                return Ok(response);
            }
        }
        let preview: String = last.chars().take(160).collect();
        Err(GatewayError::Unscripted(preview))
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let text = self.lookup(request)?.to_string();
        let prompt_tokens = request.messages.iter().map(|m| approx_tokens(&m.content)).sum();
        Ok(ChatResponse { completion_tokens: approx_tokens(&text), prompt_tokens, text, from_cache: false })
    }

    fn embed(&self, _model_id: &str, texts: &[String]) -> Result<Embeddings, GatewayError> {
        let vectors = texts
            .iter()
            .map(|t| {
                self.embeddings.get(t).cloned().ok_or_else(|| GatewayError::Unscripted(format!("embedding for {t:?}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Embeddings { vectors, from_cache: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatMessage, Llm, Purpose};

    fn request(text: &str) -> ChatRequest {
        ChatRequest::new("m", vec![ChatMessage::user(text)], Purpose::Solver)
    }

    #[test]
    fn exact_match_and_ledger() {
        let r = request("Is the sky blue?");
        let key = cache_key(&r);
        let backend = ScriptedBackend::new(vec![ScriptEntry::exact(key.0, "yes")]).unwrap();
        let llm = Llm::standalone(backend, "m");
        let resp = llm.complete(&r).unwrap();
        assert_eq!(resp.text, "yes");
        assert!(!resp.from_cache);
        assert_eq!(llm.ledger().snapshot().get(Purpose::Solver), 1);
    }

    #[test]
    fn exact_wins_over_regex_and_rules_are_ordered() {
        let r = request("alpha beta");
        let backend = ScriptedBackend::new(vec![
            ScriptEntry::regex("beta", "second"),
            ScriptEntry::regex("alpha", "first-rule"),
            ScriptEntry::exact(cache_key(&r).0, "exact"),
        ])
        .unwrap();
        assert_eq!(backend.complete(&r).unwrap().text, "exact");
        assert_eq!(backend.complete(&request("alpha beta gamma")).unwrap().text, "second");
        assert_eq!(backend.complete(&request("alpha")).unwrap().text, "first-rule");
        assert!(matches!(backend.complete(&request("zzz")), Err(GatewayError::Unscripted(_))));
    }

    #[test]
    fn regex_sees_only_last_user_message() {
        let backend = ScriptedBackend::new(vec![ScriptEntry::regex("needle", "found")]).unwrap();
        let r =
            ChatRequest::new("m", vec![ChatMessage::system("needle"), ChatMessage::user("haystack")], Purpose::Solver);
        assert!(backend.complete(&r).is_err());
    }

    #[test]
    fn lookahead_rules() {
        let backend =
            ScriptedBackend::new(vec![ScriptEntry::regex(r"(?s)^(?=.*\bkw1\b)(?=.*\bkw2\b)", "both")]).unwrap();
        assert_eq!(backend.complete(&request("kw2 ... kw1")).unwrap().text, "both");
        assert!(backend.complete(&request("kw2 only")).is_err());
    }

    #[test]
    fn script_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        let entries = vec![ScriptEntry::regex("a.c", "r1"), ScriptEntry::exact("00ff", "r2")];
        write_script(&path, &entries).unwrap();
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.starts_with(r#"{"match":{"kind":"regex","value":"a.c"},"response":"r1"}"#));
        let b = ScriptedBackend::from_file(&path).unwrap();
        assert_eq!(b.complete(&request("abc")).unwrap().text, "r1");
    }

    #[test]
    fn embeddings_fixture() {
        let llm = Llm::standalone(
            ScriptedBackend::default().with_embedding("a", vec![1.0, 0.0]).with_embedding("b", vec![0.0, 1.0]),
            "emb",
        );
        let out = llm.embed(&["a".into(), "b".into(), "a".into()]).unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(llm.ledger().snapshot().get(Purpose::Embed), 1);
    }
}
