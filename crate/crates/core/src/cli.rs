//! Command-line front end: configuration loading, backend wiring, the run
//! directory and the subcommands.
//!
//! A run directory holds `final_prompt.md`, `history.jsonl`, `metrics.csv`,
//! `manifest.json`, `checkpoint.json` and `clusters.jsonl`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::accuracy::Accuracy;
use crate::clustering::{feedback_cluster, topic_cluster, ClusterError, ClusterMode};
use crate::data::{load_jsonl, save_jsonl, split, Dataset, SplitSpec};
use crate::evaluator::{evaluate_dataset, prompt_digest, EvalError, EvalReport};
use crate::gateway::{
    write_script, CacheStore, CachingBackend, CallLedger, LedgerSnapshot, Limiter, Llm, LlmBackend, RemoteBackend,
    RemoteConfig, RetryPolicy, ScriptedBackend, DEFAULT_MAX_IN_FLIGHT,
};
use crate::optimizer::{Checkpoint, OptimizeError, Optimizer, OptimizerConfig, RunLog, RunOutcome};
use crate::probe::{probe, ProbeError, ProbeParams, DEFAULT_EPSILON, DEFAULT_PARAPHRASES};
use crate::prompt::{parse_prompt, SectionedPrompt};
use crate::synth::{generate_splits, scripted_expert_for, FacetedTaskSpec, KeywordOracle};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ABORTED: i32 = 3;

pub const METRICS_HEADER: &str = "epoch,cluster_id,batch_index,batch_size,status,p1,p2,q1,q2,accepted,validation";

const REDACTED: &str = "[redacted]";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{message}")]
    Aborted { message: String, checkpoint: Option<PathBuf> },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Aborted { .. } => EXIT_ABORTED,
            Self::Runtime(_) => EXIT_FAILURE,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Aborted { .. } => "aborted",
            Self::Runtime(_) => "runtime",
        }
    }

    /// Final machine-readable stderr line.
    pub fn json_line(&self) -> String {
        let mut v = serde_json::json!({
            "status": "error",
            "kind": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let Self::Aborted { checkpoint: Some(p), .. } = self {
            v["checkpoint"] = Value::String(p.display().to_string());
        }
        v.to_string()
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_prompt: Option<PathBuf>,
}

/// Either one dataset with a split spec, or three ready-made files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// OpenAI-compatible endpoint. `base_url` and `api_key` fall back to
    /// `FACETFORGE_BASE_URL` and `FACETFORGE_API_KEY`.
    Openai {
        model: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        base_url: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_secs: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_attempts: Option<u32>,
    },
    Scripted {
        #[serde(default = "scripted_model")]
        model: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        script: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        embeddings: Option<PathBuf>,
    },
    KeywordOracle {
        #[serde(default = "oracle_model")]
        model: String,
        spec: PathBuf,
    },
}

fn scripted_model() -> String {
    "scripted".into()
}

fn oracle_model() -> String {
    "keyword-oracle".into()
}

fn default_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub solver: BackendSpec,
    pub expert: BackendSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder: Option<BackendSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub paraphrases: usize,
    pub r: Option<f64>,
    pub epsilon: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { paraphrases: DEFAULT_PARAPHRASES, r: None, epsilon: DEFAULT_EPSILON }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub backends: BackendsConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl RunConfig {
    /// JSON form with every `api_key` replaced.
    pub fn redacted(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        redact(&mut v);
        v
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.task.initial_prompt.as_mut().map(fix);
        let d = &mut self.data;
        for p in [&mut d.dataset, &mut d.train, &mut d.validation, &mut d.test].into_iter().flatten() {
            fix(p);
        }
        let b = &mut self.backends;
        b.cache.as_mut().map(fix);
        for spec in [Some(&mut b.solver), Some(&mut b.expert), b.embedder.as_mut()].into_iter().flatten() {
            match spec {
                BackendSpec::Scripted { script, embeddings, .. } => {
                    script.as_mut().map(fix);
                    embeddings.as_mut().map(fix);
                }
                BackendSpec::KeywordOracle { spec, .. } => fix(spec),
                BackendSpec::Openai { .. } => {}
            }
        }
    }
}

fn redact(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for (k, child) in map.iter_mut() {
                if k == "api_key" && !child.is_null() {
                    *child = Value::String(REDACTED.into());
                } else {
                    redact(child);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(redact),
        _ => {}
    }
}

/// A parsed config with paths resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub run: RunConfig,
}

impl LoadedConfig {
    pub fn optimizer(&self) -> &OptimizerConfig {
        &self.run.optimizer
    }
}

type Overrides = Vec<(String, String)>;

/// Splits `--a.b value` and `--a.b=value` pairs out of `args`.
pub fn extract_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Overrides), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(s) = arg.to_str() else {
            rest.push(arg);
            continue;
        };
        let Some(flag) = s.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| CliError::Config(format!("override --{name} needs a value")))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((rest, overrides))
}

/// Sets a dot path inside a JSON object, creating objects on the way.
/// Values that parse as JSON are used as such, anything else as a string.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override path {path:?}")));
    }
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(CliError::Config(format!("override {path:?}: {:?} is not an object", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one part")
}

pub fn load_config(path: &Path, overrides: &[(String, String)], seed: Option<u64>) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut raw: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if !raw.is_object() {
        return Err(CliError::Config(format!("{}: top level must be an object", path.display())));
    }
    for (k, v) in overrides {
        apply_override(&mut raw, k, v)?;
    }
    if let Some(seed) = seed {
        apply_override(&mut raw, "optimizer.seed", &seed.to_string())?;
    }
    let mut run: RunConfig =
        serde_json::from_value(raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    run.optimizer.task_description = run.task.description.clone();
    run.optimizer.validate().map_err(CliError::Config)?;
    if run.backends.max_in_flight == 0 {
        return Err(CliError::Config("backends.max_in_flight must be at least 1".into()));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    run.resolve_paths(&base);
    Ok(LoadedConfig { path: path.to_path_buf(), run })
}

// ---------------------------------------------------------------------------
// data

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Option<Dataset>,
    /// SHA-256 of every input file, keyed by path.
    pub digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Validation => "validation",
            Self::Test => "test",
        }
    }
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    load_jsonl(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_data(config: &LoadedConfig) -> Result<LoadedData, CliError> {
    let d = &config.run.data;
    let mut digests = BTreeMap::new();
    let mut digest = |p: &Path| -> Result<(), CliError> {
        digests.insert(p.display().to_string(), file_digest(p)?);
        Ok(())
    };
    match (&d.dataset, &d.train, &d.validation) {
        (Some(all), None, None) => {
            let spec = d.split.ok_or_else(|| CliError::Config("data.dataset needs data.split".into()))?;
            let ds = load_dataset(all)?;
            digest(all)?;
            let s = split(&ds, &spec).map_err(|e| CliError::Config(format!("data.split: {e}")))?;
            Ok(LoadedData { train: s.train, validation: s.validation, test: Some(s.test), digests })
        }
        (None, Some(train), Some(validation)) => {
            let train_ds = load_dataset(train)?;
            let val_ds = load_dataset(validation)?;
            digest(train)?;
            digest(validation)?;
            let test = match &d.test {
                Some(t) => {
                    let ds = load_dataset(t)?;
                    digest(t)?;
                    Some(ds)
                }
                None => None,
            };
            Ok(LoadedData { train: train_ds, validation: val_ds, test, digests })
        }
        _ => {
            Err(CliError::Config("data needs either `dataset` with `split`, or `train` and `validation` files".into()))
        }
    }
}

impl LoadedData {
    pub fn get(&self, name: SplitName) -> Result<&Dataset, CliError> {
        match name {
            SplitName::Train => Ok(&self.train),
            SplitName::Validation => Ok(&self.validation),
            SplitName::Test => self.test.as_ref().ok_or_else(|| CliError::Config("no test split configured".into())),
        }
    }
}

/// `--dataset` if given, otherwise the named split of the configured data.
fn select_dataset(config: Option<&LoadedConfig>, dataset: Option<&Path>, name: SplitName) -> Result<Dataset, CliError> {
    if let Some(p) = dataset {
        return load_dataset(p);
    }
    let config = config.ok_or_else(|| CliError::Config("give --dataset or a --config with data".into()))?;
    Ok(load_data(config)?.get(name)?.clone())
}

fn read_prompt(path: &Path) -> Result<SectionedPrompt, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_prompt(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// backends

/// Solver, expert and optional embedder sharing one ledger and one
/// in-flight limit.
#[derive(Debug, Clone)]
pub struct Backends {
    pub solver: Llm,
    pub expert: Llm,
    pub embedder: Option<Llm>,
    pub ledger: Arc<CallLedger>,
}

impl Backends {
    pub fn from_parts(
        solver: Arc<dyn LlmBackend>,
        solver_model: &str,
        expert: Arc<dyn LlmBackend>,
        expert_model: &str,
        embedder: Option<(Arc<dyn LlmBackend>, String)>,
        max_in_flight: usize,
    ) -> Self {
        let ledger = Arc::new(CallLedger::new());
        let limiter = Arc::new(Limiter::new(max_in_flight));
        let llm = |b: Arc<dyn LlmBackend>, m: &str| Llm::new(b, m, ledger.clone(), limiter.clone());
        Self {
            solver: llm(solver, solver_model),
            expert: llm(expert, expert_model),
            embedder: embedder.map(|(b, m)| llm(b, &m)),
            ledger: ledger.clone(),
        }
    }

    /// HTTP requests issued so far by all roles.
    pub fn network_requests(&self) -> u64 {
        let mut n = self.solver.backend().network_requests() + self.expert.backend().network_requests();
        if let Some(e) = &self.embedder {
            n += e.backend().network_requests();
        }
        n
    }
}

fn model_of(spec: &BackendSpec) -> &str {
    match spec {
        BackendSpec::Openai { model, .. }
        | BackendSpec::Scripted { model, .. }
        | BackendSpec::KeywordOracle { model, .. } => model,
    }
}

fn raw_backend(spec: &BackendSpec) -> Result<Arc<dyn LlmBackend>, CliError> {
    let cfg = |e: crate::gateway::GatewayError| CliError::Config(e.to_string());
    Ok(match spec {
        BackendSpec::Openai { base_url, api_key, timeout_secs, max_attempts, .. } => {
            let env = RemoteConfig::from_env();
            let base = base_url
                .clone()
                .or_else(|| env.as_ref().map(|c| c.base_url.clone()))
                .ok_or_else(|| CliError::Config("openai backend needs base_url or FACETFORGE_BASE_URL".into()))?;
            let mut rc = RemoteConfig::new(base);
            rc.api_key = api_key.clone().or_else(|| env.as_ref().and_then(|c| c.api_key.clone()));
            if let Some(e) = &env {
                rc.embed_base_url = e.embed_base_url.clone();
                rc.embed_api_key = e.embed_api_key.clone();
            }
            if let Some(t) = timeout_secs {
                rc.timeout = Duration::from_secs(*t);
            }
            if let Some(a) = max_attempts {
                rc.retry = RetryPolicy { max_attempts: (*a).max(1), ..rc.retry };
            }
            Arc::new(RemoteBackend::new(rc))
        }
        BackendSpec::Scripted { script, embeddings, .. } => {
            let mut b = match script {
                Some(p) => ScriptedBackend::from_file(p).map_err(cfg)?,
                None => ScriptedBackend::default(),
            };
            if let Some(p) = embeddings {
                b = b.load_embeddings(p).map_err(cfg)?;
            }
            Arc::new(b)
        }
        BackendSpec::KeywordOracle { spec, .. } => {
            let text =
                std::fs::read_to_string(spec).map_err(|e| CliError::Config(format!("{}: {e}", spec.display())))?;
            let s: FacetedTaskSpec =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", spec.display())))?;
            s.validate().map_err(|e| CliError::Config(e.to_string()))?;
            Arc::new(KeywordOracle::new(s))
        }
    })
}

/// Builds every configured role. With a cache configured all roles go
/// through it. Offline, remote roles may only answer from the cache.
pub fn build_backends(config: &LoadedConfig, offline: bool) -> Result<Backends, CliError> {
    let b = &config.run.backends;
    let store = match &b.cache {
        Some(p) => Some(Arc::new(CacheStore::open(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?)),
        None => None,
    };
    let wrap = |spec: &BackendSpec| -> Result<Arc<dyn LlmBackend>, CliError> {
        let inner = raw_backend(spec)?;
        let remote = matches!(spec, BackendSpec::Openai { .. });
        Ok(match (&store, offline && remote) {
            (Some(s), off) => Arc::new(CachingBackend::new(inner, s.clone()).offline(off)),
            (None, true) => Arc::new(CachingBackend::new(inner, Arc::new(CacheStore::in_memory())).offline(true)),
            (None, false) => inner,
        })
    };
    let embedder = match &b.embedder {
        Some(spec) => Some((wrap(spec)?, model_of(spec).to_string())),
        None => None,
    };
    Ok(Backends::from_parts(
        wrap(&b.solver)?,
        model_of(&b.solver),
        wrap(&b.expert)?,
        model_of(&b.expert),
        embedder,
        b.max_in_flight,
    ))
}

fn open_cache(config: Option<&LoadedConfig>, explicit: Option<&Path>) -> Result<CacheStore, CliError> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => config
            .and_then(|c| c.run.backends.cache.clone())
            .ok_or_else(|| CliError::Config("no cache file: give --cache or set backends.cache".into()))?,
    };
    CacheStore::open(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// run directory

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Value,
    pub config_digest: String,
    pub started_at: String,
    pub finished_at: String,
    pub resumed: bool,
    pub epochs_completed: u32,
    pub final_validation: Option<Accuracy>,
    pub final_test: Option<Accuracy>,
    pub accepted_edits: usize,
    pub ledger: LedgerSnapshot,
    pub ledger_total: u64,
    pub network_requests: u64,
    pub dataset_digests: BTreeMap<String, String>,
    pub final_prompt_digest: String,
    /// SHA-256 of each artifact file written before the manifest.
    pub artifact_digests: BTreeMap<String, String>,
}

pub fn default_run_dir(base: &Path, config: &OptimizerConfig) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    base.join(format!("{stamp}-{}", &config.digest()[..12]))
}

/// Most recent `<base>/<timestamp>-<digest>` directory for this config.
pub fn latest_run_dir(base: &Path, config: &OptimizerConfig) -> Option<PathBuf> {
    let suffix = format!("-{}", &config.digest()[..12]);
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(base)
        .ok()?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(&suffix)))
        .collect();
    dirs.sort();
    dirs.pop()
}

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

fn opt_acc(a: Option<Accuracy>) -> String {
    a.map(|a| a.to_string()).unwrap_or_default()
}

/// Step rows followed by one summary row per epoch. Call counts are left
/// out so that cached and uncached runs produce the same file.
pub fn metrics_csv(log: &RunLog) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for e in &log.epochs {
        for st in log.steps.iter().filter(|st| st.epoch == e.epoch) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},",
                st.epoch,
                st.cluster_id,
                st.batch_index,
                st.batch_size,
                st.status.as_str(),
                st.p1,
                opt_acc(st.p2),
                opt_acc(st.q1),
                opt_acc(st.q2),
                u8::from(st.accepted),
            );
        }
        let _ = writeln!(s, "{},,,,epoch,,,,,,{}", e.epoch, e.validation);
    }
    s
}

pub fn history_jsonl(log: &RunLog) -> String {
    log.history.iter().map(|h| serde_json::to_string(h).expect("history serializes") + "\n").collect()
}

pub fn prompt_file_text(prompt: &SectionedPrompt) -> String {
    prompt.render() + "\n"
}

/// Writes every artifact except the manifest and returns their digests.
pub fn write_run_artifacts(dir: &Path, outcome: &RunOutcome) -> Result<BTreeMap<String, String>, CliError> {
    let files = [
        ("final_prompt.md", prompt_file_text(&outcome.best_prompt)),
        ("history.jsonl", history_jsonl(&outcome.log)),
        ("metrics.csv", metrics_csv(&outcome.log)),
        ("clusters.jsonl", clusters_jsonl(&outcome.clusters)),
    ];
    let mut digests = BTreeMap::new();
    for (name, body) in files {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes()).map_err(io_err(&path))?;
        digests.insert(name.to_string(), hex::encode(Sha256::digest(body.as_bytes())));
    }
    let ck = dir.join("checkpoint.json");
    digests.insert("checkpoint.json".into(), file_digest(&ck)?);
    Ok(digests)
}

fn clusters_jsonl(map: &crate::clustering::ClusterMap) -> String {
    map.rows().iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect()
}

fn checkpoint_sink(path: PathBuf) -> impl FnMut(&Checkpoint) -> std::io::Result<()> {
    move |c| {
        let body = serde_json::to_vec_pretty(c).map_err(std::io::Error::other)?;
        write_atomic(&path, &body)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
}

fn eval_err(e: EvalError) -> CliError {
    match e {
        EvalError::NoExamples => CliError::Config("dataset is empty".into()),
        EvalError::Gateway(g) => CliError::Runtime(format!("solver call failed: {g}")),
    }
}

/// Runs (or resumes) an optimization into `run_dir` and writes the artifacts.
pub fn run_optimize(
    config: &LoadedConfig,
    backends: &Backends,
    run_dir: &Path,
    resume: bool,
) -> Result<RunSummary, CliError> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let data = load_data(config)?;
    let initial = match &config.run.task.initial_prompt {
        Some(p) => Some(read_prompt(p)?),
        None => None,
    };
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let ck_path = run_dir.join("checkpoint.json");
    let checkpoint = if resume {
        let text = std::fs::read_to_string(&ck_path)
            .map_err(|e| CliError::Config(format!("cannot resume from {}: {e}", ck_path.display())))?;
        Some(
            serde_json::from_str::<Checkpoint>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", ck_path.display())))?,
        )
    } else {
        None
    };

    let mut opt =
        Optimizer::new(config.run.optimizer.clone(), &data.train, &data.validation, &backends.solver, &backends.expert)
            .on_checkpoint(checkpoint_sink(ck_path.clone()));
    if let Some(p) = initial {
        opt = opt.initial_prompt(p);
    }
    if let Some(c) = checkpoint {
        log::info!("resuming from epoch {} in {}", c.epoch, run_dir.display());
        opt = opt.resume(c);
    }
    let outcome = opt.run().map_err(|e| match e {
        OptimizeError::Config(_) | OptimizeError::EmptyData(_) | OptimizeError::Checkpoint(_) => {
            CliError::Config(e.to_string())
        }
        OptimizeError::Aborted { .. } => {
            CliError::Aborted { message: e.to_string(), checkpoint: ck_path.exists().then(|| ck_path.clone()) }
        }
        OptimizeError::Sink(_) => CliError::Runtime(e.to_string()),
    })?;

    let final_test = match &data.test {
        Some(t) => Some(
            evaluate_dataset(&outcome.best_prompt, t, &backends.solver)
                .map_err(|e| match e {
                    EvalError::Gateway(g) => CliError::Aborted {
                        message: format!("test evaluation failed: {g}"),
                        checkpoint: Some(ck_path.clone()),
                    },
                    other => eval_err(other),
                })?
                .accuracy,
        ),
        None => None,
    };

    let artifact_digests = write_run_artifacts(run_dir, &outcome)?;
    let ledger = backends.ledger.snapshot();
    let manifest = RunManifest {
        config: config.run.redacted(),
        config_digest: config.run.optimizer.digest(),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        resumed: resume,
        epochs_completed: outcome.checkpoint.epoch,
        final_validation: outcome.best_validation,
        final_test,
        accepted_edits: outcome.log.accepted_edits(),
        ledger_total: ledger.total(),
        ledger,
        network_requests: backends.network_requests(),
        dataset_digests: data.digests.clone(),
        final_prompt_digest: prompt_digest(&outcome.best_prompt),
        artifact_digests,
    };
    let path = run_dir.join("manifest.json");
    let body = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&path, &body).map_err(io_err(&path))?;
    Ok(RunSummary { run_dir: run_dir.to_path_buf(), manifest })
}

// ---------------------------------------------------------------------------
// standalone commands

pub fn predictions_jsonl(report: &EvalReport) -> String {
    report.predictions.iter().map(|p| serde_json::to_string(p).expect("prediction serializes") + "\n").collect()
}

/// Evaluates a prompt file, writes predictions to `out` and returns the report.
pub fn run_evaluate(prompt_path: &Path, dataset: &Dataset, solver: &Llm, out: &Path) -> Result<EvalReport, CliError> {
    let prompt = read_prompt(prompt_path)?;
    let report = evaluate_dataset(&prompt, dataset, solver).map_err(eval_err)?;
    write_atomic(out, predictions_jsonl(&report).as_bytes()).map_err(io_err(out))?;
    Ok(report)
}

fn synth_files(out: &Path, facets: usize, per_facet: usize, seed: u64) -> Result<Vec<PathBuf>, CliError> {
    let (spec, splits) = generate_splits(facets, per_facet, seed).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut written = Vec::new();
    for (name, ds) in [("train", &splits.train), ("validation", &splits.validation), ("test", &splits.test)] {
        let p = out.join(format!("{name}.jsonl"));
        save_jsonl(&p, ds).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        written.push(p);
    }
    let script = out.join("expert_script.jsonl");
    write_script(&script, &scripted_expert_for(&spec)).map_err(io_err(&script))?;
    written.push(script);
    let oracle = out.join("solver_oracle.json");
    let body = serde_json::to_vec_pretty(&spec).expect("spec serializes");
    write_atomic(&oracle, &body).map_err(io_err(&oracle))?;
    written.push(oracle);
    let config = serde_json::json!({
        "task": { "description": spec.task_description() },
        "data": { "train": "train.jsonl", "validation": "validation.jsonl", "test": "test.jsonl" },
        "optimizer": { "clusters": facets, "max_epochs": 5, "seed": seed },
        "backends": {
            "solver": { "kind": "keyword_oracle", "spec": "solver_oracle.json" },
            "expert": { "kind": "scripted", "script": "expert_script.jsonl" },
            "cache": "cache.jsonl"
        },
        "probe": {}
    });
    let cfg_path = out.join("config.json");
    let body = serde_json::to_vec_pretty(&config).expect("config serializes");
    write_atomic(&cfg_path, &body).map_err(io_err(&cfg_path))?;
    written.push(cfg_path);
    Ok(written)
}

// ---------------------------------------------------------------------------
// argument parsing

#[derive(Debug, Parser)]
#[command(name = "facetforge", version, about = "Facet-learning prompt optimizer")]
#[command(after_help = "Any `--section.key value` flag overrides that dot path of the config file.")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory (optimize) or output directory (other commands).
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Continue from the run directory's checkpoint.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Overrides `optimizer.seed`; also seeds `synth`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Never contact a remote endpoint; remote roles answer from cache only.
    #[arg(long, global = true)]
    pub offline: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Topic,
    Feedback,
    None,
}

impl From<ModeArg> for ClusterMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Topic => ClusterMode::Topic,
            ModeArg::Feedback => ClusterMode::Feedback,
            ModeArg::None => ClusterMode::None,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize the task prompt.
    Optimize,
    /// Score a prompt file on a dataset.
    Evaluate {
        #[arg(long)]
        prompt: PathBuf,
        /// Dataset JSONL; defaults to the configured split.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Predictions JSONL.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster a dataset and dump the assignment.
    Cluster {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitName,
        #[arg(long, value_enum, default_value = "topic")]
        mode: ModeArg,
        #[arg(short = 'l', long, default_value_t = 5)]
        clusters: usize,
        /// Required in feedback mode.
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the prompt's sensitivity constant from paraphrases.
    Probe {
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "validation")]
        split: SplitName,
        #[arg(short = 'n', long)]
        paraphrases: Option<usize>,
        #[arg(short = 'r', long)]
        radius: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Pairs CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect or clear the response cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Write a synthetic multi-facet task with its oracle and expert script.
    Synth {
        #[arg(long, default_value_t = 5)]
        facets: usize,
        #[arg(long, default_value_t = 40)]
        per_facet: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum CacheAction {
    Stats {
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    Purge {
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

// ---------------------------------------------------------------------------
// dispatch

fn require_config(cli: &Cli, overrides: &[(String, String)]) -> Result<LoadedConfig, CliError> {
    let path = cli.config.as_deref().ok_or_else(|| CliError::Config("this command needs --config".into()))?;
    load_config(path, overrides, cli.seed)
}

fn out_path(cli: &Cli, explicit: Option<&PathBuf>, default_name: &str) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| cli.run_dir.clone().unwrap_or_else(|| PathBuf::from(".")).join(default_name))
}

fn cmd_optimize(cli: &Cli, overrides: &[(String, String)], out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let config = require_config(cli, overrides)?;
    let run_dir = match (&cli.run_dir, cli.resume) {
        (Some(d), _) => d.clone(),
        (None, true) => latest_run_dir(Path::new("runs"), config.optimizer())
            .ok_or_else(|| CliError::Config("no earlier run for this configuration under runs/".into()))?,
        (None, false) => default_run_dir(Path::new("runs"), config.optimizer()),
    };
    let backends = build_backends(&config, cli.offline)?;
    let summary = run_optimize(&config, &backends, &run_dir, cli.resume)?;
    let m = &summary.manifest;
    let _ = writeln!(out, "run directory: {}", summary.run_dir.display());
    let _ = writeln!(out, "epochs: {}  accepted edits: {}", m.epochs_completed, m.accepted_edits);
    if let Some(v) = m.final_validation {
        let _ = writeln!(out, "validation: {}", v.display_fraction());
    }
    if let Some(t) = m.final_test {
        let _ = writeln!(out, "test: {}", t.display_fraction());
    }
    let _ = writeln!(out, "backend calls: {}  network requests: {}", m.ledger_total, m.network_requests);
    Ok(())
}

fn dispatch(cli: &Cli, overrides: &[(String, String)], out: &mut dyn std::io::Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Optimize => cmd_optimize(cli, overrides, out),
        Command::Evaluate { prompt, dataset, split, out: pred_out } => {
            let config = require_config(cli, overrides)?;
            let ds = select_dataset(Some(&config), dataset.as_deref(), *split)?;
            let backends = build_backends(&config, cli.offline)?;
            let path = out_path(cli, pred_out.as_ref(), &format!("predictions-{}.jsonl", split.as_str()));
            let report = run_evaluate(prompt, &ds, &backends.solver, &path)?;
            let _ = writeln!(out, "{}", report.accuracy.display_fraction());
            let _ = writeln!(
                out,
                "backend calls: {}  network requests: {}",
                backends.ledger.snapshot().total(),
                backends.network_requests()
            );
            Ok(())
        }
        Command::Cluster { dataset, split, mode, clusters, prompt, out: dump } => {
            let mode = ClusterMode::from(*mode);
            if mode == ClusterMode::Feedback && prompt.is_none() {
                return Err(CliError::Config("feedback clustering needs --prompt".into()));
            }
            if *clusters == 0 {
                return Err(CliError::Config("-l must be at least 1".into()));
            }
            let config = require_config(cli, overrides)?;
            let ds = select_dataset(Some(&config), dataset.as_deref(), *split)?;
            let templates = &config.run.optimizer.templates;
            let backends = build_backends(&config, cli.offline)?;
            let map = match mode {
                ClusterMode::None => crate::clustering::ClusterMap::single(
                    ds.examples.iter().map(|e| e.id.as_str()),
                    ClusterMode::None,
                    "all",
                ),
                ClusterMode::Topic => {
                    topic_cluster(&ds.examples, &backends.expert, *clusters, templates).map_err(cluster_err)?
                }
                ClusterMode::Feedback => {
                    let p = read_prompt(prompt.as_deref().expect("checked above"))?;
                    feedback_cluster(
                        &ds.examples,
                        ds.answer_kind,
                        &p,
                        &backends.solver,
                        &backends.expert,
                        *clusters,
                        templates,
                    )
                    .map_err(cluster_err)?
                }
            };
            let path = out_path(cli, dump.as_ref(), "clusters.jsonl");
            write_atomic(&path, clusters_jsonl(&map).as_bytes()).map_err(io_err(&path))?;
            for (id, n) in map.sizes() {
                let label = map.labels.get(&id).map(String::as_str).unwrap_or("");
                let _ = writeln!(out, "cluster {id} ({label}): {n}");
            }
            for w in &map.warnings {
                log::warn!("{w}");
            }
            Ok(())
        }
        Command::Probe { prompt, dataset, split, paraphrases, radius, epsilon, out: csv_out } => {
            let config = require_config(cli, overrides)?;
            if config.run.backends.embedder.is_none() {
                return Err(CliError::Config("probe needs backends.embedder".into()));
            }
            let base = read_prompt(prompt)?;
            let ds = select_dataset(Some(&config), dataset.as_deref(), *split)?;
            let backends = build_backends(&config, cli.offline)?;
            let params = ProbeParams {
                n: paraphrases.unwrap_or(config.run.probe.paraphrases),
                r: radius.or(config.run.probe.r),
                epsilon: epsilon.unwrap_or(config.run.probe.epsilon),
            };
            let embedder = backends.embedder.as_ref().expect("checked above");
            let report = probe(
                &base,
                &ds,
                params,
                &backends.solver,
                &backends.expert,
                embedder,
                &config.run.optimizer.templates,
            )
            .map_err(|e| match e {
                ProbeError::InvalidInput(_) => CliError::Config(e.to_string()),
                _ => CliError::Runtime(e.to_string()),
            })?;
            let path = out_path(cli, csv_out.as_ref(), "pairs.csv");
            write_atomic(&path, report.to_csv().as_bytes()).map_err(io_err(&path))?;
            let _ = writeln!(out, "L(eps={}) = {}", report.epsilon, report.l);
            let _ = writeln!(out, "support: {} pairs with d_x <= {:.6}", report.support, report.r);
            Ok(())
        }
        Command::Cache { action } => {
            let config = match &cli.config {
                Some(p) => Some(load_config(p, overrides, cli.seed)?),
                None => None,
            };
            match action {
                CacheAction::Stats { cache } => {
                    let store = open_cache(config.as_ref(), cache.as_deref())?;
                    let s = store.stats();
                    let _ = writeln!(out, "records: {}\nkeys: {}", s.records, s.keys);
                }
                CacheAction::Purge { cache } => {
                    let store = open_cache(config.as_ref(), cache.as_deref())?;
                    let before = store.stats();
                    store.purge().map_err(|e| CliError::Runtime(e.to_string()))?;
                    let _ = writeln!(out, "purged {} records", before.records);
                }
            }
            Ok(())
        }
        Command::Synth { facets, per_facet, out: dir } => {
            for p in synth_files(dir, *facets, *per_facet, cli.seed.unwrap_or(0))? {
                let _ = writeln!(out, "wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn cluster_err(e: ClusterError) -> CliError {
    match e {
        ClusterError::InvalidInput(_) => CliError::Config(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

/// Parses `args` (including the program name), runs the command, and
/// returns the exit code. Errors end with a JSON line on `err`.
pub fn run(args: Vec<OsString>, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32 {
    let (args, overrides) = match extract_overrides(args) {
        Ok(x) => x,
        Err(e) => return report(e, err),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    return EXIT_OK;
                }
                _ => EXIT_CONFIG,
            };
            let _ = write!(err, "{e}");
            let line = serde_json::json!({
                "status": "error", "kind": "usage", "exit_code": code, "message": e.kind().to_string(),
            });
            let _ = writeln!(err, "{line}");
            return code;
        }
    };
    match dispatch(&cli, &overrides, out) {
        Ok(()) => EXIT_OK,
        Err(e) => report(e, err),
    }
}

fn report(e: CliError, err: &mut dyn std::io::Write) -> i32 {
    let _ = writeln!(err, "error: {e}");
    let _ = writeln!(err, "{}", e.json_line());
    e.exit_code()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, ov) = extract_overrides(os(&[
            "ff",
            "--config",
            "a.json",
            "--optimizer.mode",
            "greedy",
            "--probe.r=0.3",
            "optimize",
        ]))
        .unwrap();
        assert_eq!(rest, os(&["ff", "--config", "a.json", "optimize"]));
        assert_eq!(ov, vec![("optimizer.mode".into(), "greedy".into()), ("probe.r".into(), "0.3".into())]);
        assert!(extract_overrides(os(&["ff", "--optimizer.mode"])).is_err());
    }

    #[test]
    fn override_values() {
        let mut v = serde_json::json!({"optimizer": {"clusters": 5}});
        apply_override(&mut v, "optimizer.clusters", "3").unwrap();
        apply_override(&mut v, "optimizer.mode", "greedy").unwrap();
        apply_override(&mut v, "probe.r", "0.25").unwrap();
        assert_eq!(v, serde_json::json!({"optimizer": {"clusters": 3, "mode": "greedy"}, "probe": {"r": 0.25}}));
        assert!(apply_override(&mut v, "optimizer.clusters.x", "1").is_err());
        assert!(apply_override(&mut v, "a..b", "1").is_err());
    }

    #[test]
    fn redaction_reaches_nested_keys() {
        let mut v = serde_json::json!({"backends": {"solver": {"api_key": "sk-1"}, "expert": {"api_key": null}}});
        redact(&mut v);
        assert_eq!(v["backends"]["solver"]["api_key"], REDACTED);
        assert!(v["backends"]["expert"]["api_key"].is_null());
    }

    #[test]
    fn prompt_file_round_trips() {
        let p = SectionedPrompt::from_description("Solve it.").unwrap();
        assert_eq!(parse_prompt(&prompt_file_text(&p)).unwrap(), p);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Aborted { message: "x".into(), checkpoint: None }.exit_code(), 3);
        let line: Value = serde_json::from_str(&CliError::Config("bad".into()).json_line()).unwrap();
        assert_eq!(line["exit_code"], 2);
        assert_eq!(line["message"], "bad");
    }
}
