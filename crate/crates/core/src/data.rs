//! Datasets: JSONL loading, seeded splits and answer normalization.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("invalid split: {0}")]
    InvalidSpec(String),
    #[error("dataset is empty")]
    Empty,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no {kind} answer found in {raw:?}")]
pub struct UnparseableAnswer {
    pub kind: AnswerKind,
    pub raw: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    MultipleChoice,
    Integer,
    ExactMatch,
}

impl fmt::Display for AnswerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MultipleChoice => "multiple_choice",
            Self::Integer => "integer",
            Self::ExactMatch => "exact_match",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<Choice>>,
    #[serde(rename = "answer")]
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_hint: Option<String>,
}

impl Example {
    /// Question followed by `(A) ...` lines when choices are present.
    pub fn render_question(&self) -> String {
        let mut s = self.question.trim_end().to_string();
        if let Some(choices) = &self.choices {
            for c in choices {
                s.push_str(&format!("\n({}) {}", c.label, c.text));
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub answer_kind: AnswerKind,
}

impl Dataset {
    /// Validates ids, choice labels and infers the answer kind.
    pub fn from_examples(examples: Vec<Example>) -> Result<Self, DataError> {
        if examples.is_empty() {
            return Err(DataError::Empty);
        }
        let mut seen = HashSet::new();
        for e in &examples {
            if !seen.insert(e.id.as_str()) {
                return Err(DataError::DuplicateId(e.id.clone()));
            }
        }
        let with_choices = examples.iter().filter(|e| e.choices.is_some()).count();
        let answer_kind = if with_choices == examples.len() {
            for e in &examples {
                let choices = e.choices.as_deref().unwrap_or_default();
                for c in choices {
                    if !matches!(c.label.as_str(), "A" | "B" | "C" | "D" | "E") {
                        return Err(DataError::Inconsistent(format!(
                            "example {:?}: choice label {:?} is not one of A-E",
                            e.id, c.label
                        )));
                    }
                }
                if !choices.iter().any(|c| c.label == e.gold_answer.trim()) {
                    return Err(DataError::Inconsistent(format!(
                        "example {:?}: answer {:?} is not a choice label",
                        e.id, e.gold_answer
                    )));
                }
            }
            AnswerKind::MultipleChoice
        } else if with_choices > 0 {
            return Err(DataError::Inconsistent("some rows have choices and others do not".into()));
        } else if examples
            .iter()
            .all(|e| normalize_answer(&e.gold_answer, AnswerKind::Integer).is_ok_and(|n| is_integer(&n)))
        {
            AnswerKind::Integer
        } else {
            AnswerKind::ExactMatch
        };
        Ok(Self { examples, answer_kind })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Keeps the answer kind; used for splits and sub-selections.
    pub fn subset(&self, examples: Vec<Example>) -> Self {
        Self { examples, answer_kind: self.answer_kind }
    }

    pub fn normalized_gold(&self, example: &Example) -> Result<String, UnparseableAnswer> {
        normalize_answer(&example.gold_answer, self.answer_kind)
    }
}

pub fn load_jsonl(path: &Path) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        examples.push(ex);
    }
    Dataset::from_examples(examples)
}

pub fn save_jsonl(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in &dataset.examples {
        serde_json::to_writer(&mut out, e).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Shuffles with SplitMix64/Fisher–Yates and cuts train, validation, test in
/// that order.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Splits, DataError> {
    let SplitSpec { train_size, validation_size, test_size, seed } = *spec;
    if train_size == 0 || validation_size == 0 || test_size == 0 {
        return Err(DataError::InvalidSpec("split sizes must be positive".into()));
    }
    let need = train_size + validation_size + test_size;
    if need > dataset.len() {
        return Err(DataError::InvalidSpec(format!(
            "sizes sum to {need} but the dataset has {} examples",
            dataset.len()
        )));
    }
    let mut shuffled = dataset.examples.clone();
    SplitMix64::new(seed).shuffle(&mut shuffled);
    let mut rest = shuffled.into_iter();
    let train: Vec<_> = rest.by_ref().take(train_size).collect();
    let validation: Vec<_> = rest.by_ref().take(validation_size).collect();
    let test: Vec<_> = rest.take(test_size).collect();
    Ok(Splits { train: dataset.subset(train), validation: dataset.subset(validation), test: dataset.subset(test) })
}

fn choice_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b([A-Ea-e])\b").expect("static regex"))
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(-)?\s*[$€£¥]?\s*(-)?(\d[\d,]*)(\.\d+)?").expect("static regex"))
}

fn is_integer(s: &str) -> bool {
    let digits = s.strip_prefix('-').unwrap_or(s);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

/// Canonical form of an answer.
///
/// * multiple choice: first standalone letter A–E, uppercased
/// * integer: first number with commas and currency stripped, sign kept,
///   leading zeros and a zero fractional part dropped
/// * exact match: trimmed, whitespace collapsed, lowercased
pub fn normalize_answer(raw: &str, kind: AnswerKind) -> Result<String, UnparseableAnswer> {
    let fail = || UnparseableAnswer { kind, raw: raw.to_string() };
    match kind {
        AnswerKind::MultipleChoice => choice_re().captures(raw).map(|c| c[1].to_ascii_uppercase()).ok_or_else(fail),
        AnswerKind::Integer => {
            let caps = number_re().captures(raw).ok_or_else(fail)?;
            let negative = caps.get(1).is_some() || caps.get(2).is_some();
            let digits: String = caps[3].chars().filter(char::is_ascii_digit).collect();
            let digits = digits.trim_start_matches('0');
            let digits = if digits.is_empty() { "0" } else { digits };
            let mut out = String::new();
            if negative && digits != "0" {
                out.push('-');
            }
            out.push_str(digits);
            if let Some(frac) = caps.get(4) {
                let frac = frac.as_str().trim_end_matches('0');
                if frac != "." {
                    out.push_str(frac);
                }
            }
            Ok(out)
        }
        AnswerKind::ExactMatch => {
            let s = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
            if s.is_empty() {
                Err(fail())
            } else {
                Ok(s)
            }
        }
    }
}
