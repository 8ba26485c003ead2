//! Mini-batch feedback, batch-level combination and the edit history.

use std::collections::VecDeque;

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use crate::accuracy::format_signed;
use crate::data::Example;
use crate::evaluator::Prediction;
use crate::gateway::{ChatMessage, GatewayError, Llm, Purpose};
use crate::prompt::{parse_edits, EditProposal, SectionedPrompt};
use crate::templates::Templates;

/// Most edit blocks kept from one combine reply.
pub const MAX_COMBINED_EDITS: usize = 3;
pub const NO_HOLDOUT: &str = "(none available)";

/// Result of an expert step that may legitimately produce nothing usable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome<T> {
    Ready(T),
    Skipped { reason: String, raw: String },
}

impl<T> Outcome<T> {
    pub fn ready(self) -> Option<T> {
        match self {
            Self::Ready(t) => Some(t),
            Self::Skipped { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinibatchFeedback {
    pub cluster_id: usize,
    pub minibatch_ids: Vec<String>,
    pub feedback_text: String,
    pub parsed_edits: Vec<EditProposal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEdit {
    pub batch_id: String,
    pub combined_text: String,
    pub edits: Vec<EditProposal>,
}

impl BatchEdit {
    /// Text stored in the history for this edit set.
    pub fn summary(&self) -> String {
        self.edits.iter().map(EditProposal::summary).collect::<Vec<_>>().join("; ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub edit_text: String,
    pub accuracy_delta: Rational64,
}

/// Bounded list of past edits with their accuracy changes. Capacity 0
/// disables the history entirely.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryLedger {
    entries: VecDeque<HistoryEntry>,
    capacity: usize,
}

impl HistoryLedger {
    pub fn new(capacity: usize) -> Self {
        Self { entries: VecDeque::new(), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends `(edit_text, after - before)` and evicts beyond capacity.
    pub fn record(&mut self, edit_text: &str, before: Rational64, after: Rational64) -> HistoryEntry {
        let entry = HistoryEntry { edit_text: edit_text.to_string(), accuracy_delta: after - before };
        if self.capacity > 0 {
            self.entries.push_back(entry.clone());
            while self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
        entry
    }

    /// `1. <edit> (Δ accuracy: +0.0400)`, oldest first. Empty string when
    /// there is nothing to show.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| format!("{}. {} (Δ accuracy: {})", i + 1, e.edit_text, format_signed(e.accuracy_delta)))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn render_wrong(i: usize, example: &Example, prediction: &Prediction) -> String {
    format!(
        "## Question {}\n{}\nReasoning: {}\nPredicted answer: {}\nCorrect answer: {}",
        i + 1,
        example.render_question(),
        if prediction.reasoning.is_empty() { "(none)" } else { &prediction.reasoning },
        prediction.extracted.as_deref().unwrap_or("(no answer)"),
        example.gold_answer
    )
}

fn render_wrong_list(wrong: &[(&Example, &Prediction)]) -> String {
    wrong.iter().enumerate().map(|(i, (e, p))| render_wrong(i, e, p)).collect::<Vec<_>>().join("\n\n")
}

pub fn minibatch_message(
    task_description: &str,
    prompt: &SectionedPrompt,
    wrong: &[(&Example, &Prediction)],
    history: &HistoryLedger,
) -> String {
    let history_text = if history.is_empty() { "(no edits yet)".to_string() } else { history.render() };
    format!(
        "# Task description\n{task_description}\n\n# Current prompt\n{}\n\n# Edit history\n{history_text}\n\n# Incorrectly answered questions\n{}",
        prompt.render(),
        render_wrong_list(wrong)
    )
}

pub fn minibatch_feedback(
    task_description: &str,
    prompt: &SectionedPrompt,
    cluster_id: usize,
    wrong: &[(&Example, &Prediction)],
    history: &HistoryLedger,
    expert: &Llm,
    templates: &Templates,
) -> Result<Outcome<MinibatchFeedback>, GatewayError> {
    if wrong.is_empty() || wrong.iter().any(|(_, p)| p.correct) {
        return Err(GatewayError::InvalidRequest("feedback needs only incorrect predictions".into()));
    }
    let reply = expert.chat(
        Purpose::ExpertFeedback,
        vec![
            ChatMessage::system(templates.feedback.clone()),
            ChatMessage::user(minibatch_message(task_description, prompt, wrong, history)),
        ],
    )?;
    Ok(match parse_edits(&reply.text) {
        Ok(edits) => Outcome::Ready(MinibatchFeedback {
            cluster_id,
            minibatch_ids: wrong.iter().map(|(e, _)| e.id.clone()).collect(),
            feedback_text: reply.text,
            parsed_edits: edits,
        }),
        Err(e) => Outcome::Skipped { reason: e.to_string(), raw: reply.text },
    })
}

pub fn combine_message(
    task_description: &str,
    prompt: &SectionedPrompt,
    feedbacks: &[MinibatchFeedback],
    holdout: &[(&Example, &Prediction)],
) -> String {
    let holdout_text = if holdout.is_empty() { NO_HOLDOUT.to_string() } else { render_wrong_list(holdout) };
    let feedback_text = feedbacks
        .iter()
        .enumerate()
        .map(|(i, f)| format!("## Feedback {}\n{}", i + 1, f.feedback_text.trim()))
        .collect::<Vec<_>>()
        .join("\n\n");
    format!(
        "# Task description\n{task_description}\n\n# Current prompt\n{}\n\n# Additional incorrect examples\n{holdout_text}\n\n# Mini-batch feedback\n{feedback_text}",
        prompt.render()
    )
}

pub fn combine(
    task_description: &str,
    prompt: &SectionedPrompt,
    batch_id: &str,
    feedbacks: &[MinibatchFeedback],
    holdout: &[(&Example, &Prediction)],
    expert: &Llm,
    templates: &Templates,
) -> Result<Outcome<BatchEdit>, GatewayError> {
    if feedbacks.is_empty() {
        return Err(GatewayError::InvalidRequest("nothing to combine".into()));
    }
    let reply = expert.chat(
        Purpose::ExpertCombine,
        vec![
            ChatMessage::system(templates.combine.clone()),
            ChatMessage::user(combine_message(task_description, prompt, feedbacks, holdout)),
        ],
    )?;
    Ok(match parse_edits(&reply.text) {
        Ok(mut edits) => {
            if edits.len() > MAX_COMBINED_EDITS {
                log::warn!("{batch_id}: combine returned {} edits, keeping {MAX_COMBINED_EDITS}", edits.len());
                edits.truncate(MAX_COMBINED_EDITS);
            }
            Outcome::Ready(BatchEdit { batch_id: batch_id.to_string(), combined_text: reply.text, edits })
        }
        Err(e) => Outcome::Skipped { reason: e.to_string(), raw: reply.text },
    })
}
