//! Groups training examples into facet clusters and cuts clusters into
//! batches and mini-batches.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use fancy_regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AnswerKind, Example};
use crate::evaluator::{evaluate, parallel_map, EvalError, Prediction};
use crate::gateway::{ChatMessage, GatewayError, Llm, Purpose};
use crate::prompt::SectionedPrompt;
use crate::rng::{derive_seed, SplitMix64};
use crate::templates::{fill, Templates};

pub const MISC_LABEL: &str = "misc";
pub const CORRECT_LABEL: &str = "correct";

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("invalid clustering input: {0}")]
    InvalidInput(String),
    #[error("could not parse grouping output: {0}")]
    Parse(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMode {
    Topic,
    Feedback,
    None,
}

impl ClusterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Topic => "topic",
            Self::Feedback => "feedback",
            Self::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMap {
    pub assignments: BTreeMap<String, usize>,
    pub labels: BTreeMap<usize, String>,
    pub mode: ClusterMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub example_id: String,
    pub cluster_id: usize,
    pub label: String,
}

impl ClusterMap {
    /// Everything in cluster 0.
    pub fn single<'a>(ids: impl IntoIterator<Item = &'a str>, mode: ClusterMode, label: &str) -> Self {
        Self {
            assignments: ids.into_iter().map(|id| (id.to_string(), 0)).collect(),
            labels: BTreeMap::from([(0, label.to_string())]),
            mode,
            warnings: Vec::new(),
        }
    }

    pub fn cluster_count(&self) -> usize {
        self.labels.len()
    }

    /// Member ids of `cluster`, sorted.
    pub fn members(&self, cluster: usize) -> Vec<String> {
        self.assignments.iter().filter(|(_, c)| **c == cluster).map(|(id, _)| id.clone()).collect()
    }

    pub fn sizes(&self) -> BTreeMap<usize, usize> {
        let mut sizes: BTreeMap<usize, usize> = self.labels.keys().map(|c| (*c, 0)).collect();
        for c in self.assignments.values() {
            *sizes.entry(*c).or_default() += 1;
        }
        sizes
    }

    /// Checks coverage of `ids`, nonempty clusters and the cluster bound.
    pub fn check(&self, ids: &[&str], l: usize) -> Result<(), String> {
        let expected: BTreeSet<&str> = ids.iter().copied().collect();
        let actual: BTreeSet<&str> = self.assignments.keys().map(String::as_str).collect();
        if expected != actual {
            return Err("assignments do not cover the examples exactly".into());
        }
        if self.labels.is_empty() {
            return Err("no clusters".into());
        }
        if self.sizes().values().any(|n| *n == 0) {
            return Err("empty cluster".into());
        }
        // one extra slot for "misc", and one more for "correct" in feedback mode
        let extra = if self.mode == ClusterMode::Feedback { 2 } else { 1 };
        if self.cluster_count() > l + extra {
            return Err(format!("{} clusters exceed bound {}", self.cluster_count(), l + extra));
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<ClusterRow> {
        self.assignments
            .iter()
            .map(|(id, c)| ClusterRow {
                example_id: id.clone(),
                cluster_id: *c,
                label: self.labels.get(c).cloned().unwrap_or_default(),
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for row in self.rows() {
            serde_json::to_writer(&mut f, &row)?;
            f.write_all(b"\n")?;
        }
        f.flush()
    }
}

/// One grouping decision: item index (1-based) to cluster index and label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grouping {
    pub cluster: usize,
    pub label: String,
}

/// Parses `<item> -> <cluster>: <label>` lines. Lines that do not match, or
/// that name an item or cluster out of range, are ignored. Returns one slot
/// per item; the first line for an item wins.
pub fn parse_grouping(output: &str, items: usize, l: usize) -> Result<Vec<Option<Grouping>>, ClusterError> {
    let line_re = Regex::new(r"^\s*\[?(\d+)\]?\s*(?:->|→)\s*(\d+)\s*:\s*(.*?)\s*$").expect("grouping regex");
    let mut slots = vec![None; items];
    let mut parsed = 0;
    for line in output.lines() {
        let Ok(Some(caps)) = line_re.captures(line) else { continue };
        let (Ok(item), Ok(cluster)) = (caps[1].parse::<usize>(), caps[2].parse::<usize>()) else {
            continue;
        };
        if item == 0 || item > items || cluster == 0 || cluster > l {
            continue;
        }
        parsed += 1;
        let slot = &mut slots[item - 1];
        if slot.is_none() {
            let label = caps[3].trim().to_string();
            *slot =
                Some(Grouping { cluster, label: if label.is_empty() { format!("cluster {cluster}") } else { label } });
        }
    }
    if parsed == 0 {
        let preview: String = output.chars().take(160).collect();
        return Err(ClusterError::Parse(preview));
    }
    Ok(slots)
}

fn numbered(items: &[String]) -> String {
    items.iter().enumerate().map(|(i, s)| format!("{}. {}", i + 1, s)).collect::<Vec<_>>().join("\n")
}

/// Reduces an expert reply to a one-line item.
fn one_line(reply: &str) -> String {
    let line = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let line = line.strip_prefix("Sub-topic:").or_else(|| line.strip_prefix("Feedback:")).unwrap_or(line).trim();
    line.trim_end_matches('.').trim().to_string()
}

/// Sends the deduplicated, sorted item list to the expert and maps every
/// item to a cluster index. Unmapped items go to [`MISC_LABEL`].
fn group_items(
    items: &BTreeSet<String>,
    l: usize,
    header: &str,
    expert: &Llm,
    templates: &Templates,
    warnings: &mut Vec<String>,
) -> Result<BTreeMap<String, (usize, String)>, ClusterError> {
    let list: Vec<String> = items.iter().cloned().collect();
    let reply = expert.chat(
        Purpose::ExpertCluster,
        vec![
            ChatMessage::system(fill(&templates.group, &[("l", &l.to_string())])),
            ChatMessage::user(format!("{header}\n{}", numbered(&list))),
        ],
    )?;
    let slots = parse_grouping(&reply.text, list.len(), l)?;
    let mut out = BTreeMap::new();
    for (item, slot) in list.into_iter().zip(slots) {
        match slot {
            Some(g) => {
                out.insert(item, (g.cluster, g.label));
            }
            None => {
                warnings.push(format!("grouping omitted {item:?}; assigned to {MISC_LABEL}"));
                out.insert(item, (l + 1, MISC_LABEL.to_string()));
            }
        }
    }
    Ok(out)
}

/// Renumbers raw cluster indices densely from `first_id`, in index order.
fn compact(
    raw: &BTreeMap<String, (usize, String)>,
    first_id: usize,
) -> (BTreeMap<usize, usize>, BTreeMap<usize, String>) {
    let mut ids = BTreeMap::new();
    let mut labels = BTreeMap::new();
    let used: BTreeSet<usize> = raw.values().map(|(c, _)| *c).collect();
    for (i, c) in used.into_iter().enumerate() {
        ids.insert(c, first_id + i);
    }
    // label of a cluster = the label given to its first item
    for (c, label) in raw.values() {
        labels.entry(ids[c]).or_insert_with(|| label.clone());
    }
    (ids, labels)
}

pub fn topic_cluster(
    train: &[Example],
    expert: &Llm,
    l: usize,
    templates: &Templates,
) -> Result<ClusterMap, ClusterError> {
    if l == 0 {
        return Err(ClusterError::InvalidInput("cluster count must be at least 1".into()));
    }
    if train.is_empty() {
        return Err(ClusterError::InvalidInput("no training examples".into()));
    }
    if l == 1 {
        return Ok(ClusterMap::single(train.iter().map(|e| e.id.as_str()), ClusterMode::Topic, "all"));
    }
    let subtopics = parallel_map(train, expert.max_in_flight(), |e| {
        expert
            .chat(
                Purpose::ExpertCluster,
                vec![
                    ChatMessage::system(templates.subtopic.clone()),
                    ChatMessage::user(format!("# Question to categorize\n{}", e.render_question())),
                ],
            )
            .map(|r| one_line(&r.text))
    })?;
    let mut warnings = Vec::new();
    let distinct: BTreeSet<String> = subtopics.iter().cloned().collect();
    let grouped = group_items(&distinct, l, "# Sub-topics to group", expert, templates, &mut warnings)?;
    let (renumber, labels) = compact(&grouped, 0);
    let assignments = train.iter().zip(&subtopics).map(|(e, t)| (e.id.clone(), renumber[&grouped[t].0])).collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ClusterMap { assignments, labels, mode: ClusterMode::Topic, warnings })
}

pub fn diagnose_message(example: &Example, prediction: &Prediction) -> String {
    format!(
        "# Incorrect example to diagnose\nQuestion: {}\nReasoning: {}\nPredicted answer: {}\nCorrect answer: {}",
        example.render_question(),
        prediction.reasoning,
        prediction.extracted.as_deref().unwrap_or("(no answer)"),
        example.gold_answer
    )
}

pub fn feedback_cluster(
    train: &[Example],
    kind: AnswerKind,
    prompt: &SectionedPrompt,
    solver: &Llm,
    expert: &Llm,
    l: usize,
    templates: &Templates,
) -> Result<ClusterMap, ClusterError> {
    if l == 0 {
        return Err(ClusterError::InvalidInput("cluster count must be at least 1".into()));
    }
    let report = evaluate(prompt, train, kind, solver)?;
    let by_id: BTreeMap<&str, &Example> = train.iter().map(|e| (e.id.as_str(), e)).collect();
    let (right, wrong): (Vec<&Prediction>, Vec<&Prediction>) = report.predictions.iter().partition(|p| p.correct);

    let mut assignments = BTreeMap::new();
    let mut labels = BTreeMap::new();
    let mut next_id = 0;
    if !right.is_empty() {
        labels.insert(0, CORRECT_LABEL.to_string());
        for p in &right {
            assignments.insert(p.example_id.clone(), 0);
        }
        next_id = 1;
    }
    if wrong.is_empty() {
        return Ok(ClusterMap { assignments, labels, mode: ClusterMode::Feedback, warnings: Vec::new() });
    }
    if l == 1 {
        labels.insert(next_id, "all incorrect".to_string());
        for p in &wrong {
            assignments.insert(p.example_id.clone(), next_id);
        }
        return Ok(ClusterMap { assignments, labels, mode: ClusterMode::Feedback, warnings: Vec::new() });
    }

    let feedbacks = parallel_map(&wrong, expert.max_in_flight(), |p| {
        expert
            .chat(
                Purpose::ExpertCluster,
                vec![
                    ChatMessage::system(templates.diagnose.clone()),
                    ChatMessage::user(diagnose_message(by_id[p.example_id.as_str()], p)),
                ],
            )
            .map(|r| one_line(&r.text))
    })?;
    let mut warnings = Vec::new();
    let distinct: BTreeSet<String> = feedbacks.iter().cloned().collect();
    let grouped = group_items(&distinct, l, "# Feedbacks to group", expert, templates, &mut warnings)?;
    let (renumber, group_labels) = compact(&grouped, next_id);
    labels.extend(group_labels);
    for (p, f) in wrong.iter().zip(&feedbacks) {
        assignments.insert(p.example_id.clone(), renumber[&grouped[f].0]);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ClusterMap { assignments, labels, mode: ClusterMode::Feedback, warnings })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub cluster_id: usize,
    pub batch_index: usize,
    pub ids: Vec<String>,
    pub minibatches: Vec<Vec<String>>,
}

/// Cuts each cluster (in cluster-id order) into batches and mini-batches after
/// a seed-deterministic shuffle of its members.
pub fn batches(map: &ClusterMap, batch_size: usize, minibatch_size: usize, seed: u64) -> Vec<Batch> {
    assert!(minibatch_size >= 1 && minibatch_size <= batch_size, "need 1 <= minibatch_size <= batch_size");
    let mut out = Vec::new();
    for &cluster in map.labels.keys() {
        let mut ids = map.members(cluster);
        if ids.is_empty() {
            continue;
        }
        SplitMix64::new(derive_seed(seed, &[cluster as u64])).shuffle(&mut ids);
        let mut chunks: Vec<Vec<String>> = ids.chunks(batch_size).map(<[String]>::to_vec).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < minibatch_size) {
            let tail = chunks.pop().expect("nonempty");
            chunks.last_mut().expect("has previous").extend(tail);
        }
        for (batch_index, ids) in chunks.into_iter().enumerate() {
            let minibatches = ids.chunks(minibatch_size).map(<[String]>::to_vec).collect();
            out.push(Batch { cluster_id: cluster, batch_index, ids, minibatches });
        }
    }
    out
}
