//! Runs the solver over examples and scores the extracted answers.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::accuracy::Accuracy;
use crate::data::{normalize_answer, AnswerKind, Dataset, Example};
use crate::gateway::{ChatMessage, GatewayError, Llm, Purpose};
use crate::prompt::SectionedPrompt;

/// Appended to every question sent to the solver.
pub const ANSWER_INSTRUCTION: &str =
    "Think step by step. End your response with a line of the form \"Answer: <your answer>\".";

const ANSWER_MARKER: &str = "Answer:";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no examples to evaluate")]
    NoExamples,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    pub raw_output: String,
    pub reasoning: String,
    /// `None` when no answer could be extracted.
    pub extracted: Option<String>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictions: Vec<Prediction>,
    pub accuracy: Accuracy,
    pub prompt_digest: String,
}

impl EvalReport {
    pub fn wrong(&self) -> impl Iterator<Item = &Prediction> {
        self.predictions.iter().filter(|p| !p.correct)
    }
}

pub fn prompt_digest(prompt: &SectionedPrompt) -> String {
    hex::encode(Sha256::digest(prompt.render().as_bytes()))
}

pub fn solver_messages(prompt: &SectionedPrompt, example: &Example) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(prompt.render()),
        ChatMessage::user(format!("{}\n\n{}", example.render_question(), ANSWER_INSTRUCTION)),
    ]
}

/// Splits raw solver output at the last answer marker.
pub fn extract_answer(raw: &str, kind: AnswerKind) -> (String, Option<String>) {
    match raw.rfind(ANSWER_MARKER) {
        Some(pos) => {
            let reasoning = raw[..pos].trim().to_string();
            let tail = &raw[pos + ANSWER_MARKER.len()..];
            let answer_line = tail.lines().next().unwrap_or("");
            (reasoning, normalize_answer(answer_line, kind).ok())
        }
        None => (raw.trim().to_string(), None),
    }
}

pub fn predict(
    prompt: &SectionedPrompt,
    example: &Example,
    kind: AnswerKind,
    solver: &Llm,
) -> Result<Prediction, GatewayError> {
    let response = solver.chat(Purpose::Solver, solver_messages(prompt, example))?;
    let (reasoning, extracted) = extract_answer(&response.text, kind);
    let gold = normalize_answer(&example.gold_answer, kind).ok();
    let correct = matches!((&extracted, &gold), (Some(a), Some(g)) if a == g);
    Ok(Prediction { example_id: example.id.clone(), raw_output: response.text, reasoning, extracted, correct })
}

/// Maps `f` over `items` on up to `workers` threads, preserving input order.
/// The first error (by input position) wins.
pub(crate) fn parallel_map<T, R, E, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R, E>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("slots lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("slots lock").into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Evaluates `prompt` on `examples`. Predictions are ordered by example id,
/// so the report does not depend on input order or thread scheduling.
pub fn evaluate(
    prompt: &SectionedPrompt,
    examples: &[Example],
    kind: AnswerKind,
    solver: &Llm,
) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::NoExamples);
    }
    let mut predictions = parallel_map(examples, solver.max_in_flight(), |e| predict(prompt, e, kind, solver))?;
    predictions.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let correct = predictions.iter().filter(|p| p.correct).count() as u64;
    Ok(EvalReport {
        accuracy: Accuracy::new(correct, predictions.len() as u64),
        predictions,
        prompt_digest: prompt_digest(prompt),
    })
}

pub fn evaluate_dataset(prompt: &SectionedPrompt, dataset: &Dataset, solver: &Llm) -> Result<EvalReport, EvalError> {
    evaluate(prompt, &dataset.examples, dataset.answer_kind, solver)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Choice;
    use crate::gateway::{ScriptEntry, ScriptedBackend};

    fn mcq(id: &str, gold: &str) -> Example {
        Example {
            id: id.into(),
            question: format!("q-{id}"),
            choices: Some(
                ["A", "B", "C"].iter().map(|l| Choice { label: l.to_string(), text: format!("opt {l}") }).collect(),
            ),
            gold_answer: gold.into(),
            topic_hint: None,
        }
    }

    fn prompt() -> SectionedPrompt {
        SectionedPrompt::from_description("Answer it.").unwrap()
    }

    #[test]
    fn predict_with_marker() {
        let solver = Llm::standalone(
            ScriptedBackend::new(vec![ScriptEntry::regex("q-1", "Because X.\nAnswer: B")]).unwrap(),
            "s",
        );
        let p = predict(&prompt(), &mcq("1", "B"), AnswerKind::MultipleChoice, &solver).unwrap();
        assert!(p.correct);
        assert_eq!(p.reasoning, "Because X.");
        assert_eq!(p.extracted.as_deref(), Some("B"));
    }

    #[test]
    fn predict_without_marker() {
        let solver = Llm::standalone(ScriptedBackend::new(vec![ScriptEntry::regex("q-1", "I think B")]).unwrap(), "s");
        let p = predict(&prompt(), &mcq("1", "B"), AnswerKind::MultipleChoice, &solver).unwrap();
        assert!(!p.correct);
        assert_eq!(p.extracted, None);
        assert_eq!(p.reasoning, "I think B");
    }

    #[test]
    fn last_marker_wins() {
        let raw = "Answer: A\nOn reflection that is wrong.\nAnswer: C";
        let (reasoning, extracted) = extract_answer(raw, AnswerKind::MultipleChoice);
        assert_eq!(extracted.as_deref(), Some("C"));
        assert_eq!(reasoning, "Answer: A\nOn reflection that is wrong.");
    }

    #[test]
    fn request_shape() {
        let msgs = solver_messages(&prompt(), &mcq("1", "A"));
        assert_eq!(msgs[0], ChatMessage::system("## Introduction\nAnswer it."));
        assert_eq!(
            msgs[1].content,
            "q-1\n(A) opt A\n(B) opt B\n(C) opt C\n\nThink step by step. End your response with a line of the form \"Answer: <your answer>\"."
        );
    }

    fn three_of_four() -> (Vec<Example>, Llm) {
        let examples = vec![mcq("1", "A"), mcq("2", "B"), mcq("3", "C"), mcq("4", "A")];
        let solver = Llm::standalone(
            ScriptedBackend::new(vec![
                ScriptEntry::regex("q-1", "Answer: A"),
                ScriptEntry::regex("q-2", "Answer: B"),
                ScriptEntry::regex("q-3", "Answer: C"),
                ScriptEntry::regex("q-4", "Answer: B"),
            ])
            .unwrap(),
            "s",
        );
        (examples, solver)
    }

    #[test]
    fn evaluate_three_of_four() {
        let (examples, solver) = three_of_four();
        let r = evaluate(&prompt(), &examples, AnswerKind::MultipleChoice, &solver).unwrap();
        assert_eq!((r.accuracy.correct, r.accuracy.total), (3, 4));
        assert_eq!(r.predictions.iter().filter(|p| p.correct).count(), 3);
        assert_eq!(r.prompt_digest, prompt_digest(&prompt()));
        assert_eq!(solver.ledger().snapshot().get(Purpose::Solver), 4);
    }

    #[test]
    fn evaluate_is_permutation_invariant() {
        let (mut examples, solver) = three_of_four();
        let a = evaluate(&prompt(), &examples, AnswerKind::MultipleChoice, &solver).unwrap();
        examples.reverse();
        let b = evaluate(&prompt(), &examples, AnswerKind::MultipleChoice, &solver).unwrap();
        assert_eq!(a, b);
        let ids: Vec<_> = a.predictions.iter().map(|p| p.example_id.as_str()).collect();
        assert_eq!(ids, vec!["1", "2", "3", "4"]);
    }

    #[test]
    fn all_correct_and_empty() {
        let solver = Llm::standalone(ScriptedBackend::new(vec![ScriptEntry::regex(".*", "Answer: A")]).unwrap(), "s");
        let examples = vec![mcq("1", "A"), mcq("2", "A")];
        let r = evaluate(&prompt(), &examples, AnswerKind::MultipleChoice, &solver).unwrap();
        assert!(r.accuracy.is_perfect());
        assert!(matches!(evaluate(&prompt(), &[], AnswerKind::MultipleChoice, &solver), Err(EvalError::NoExamples)));
    }

    #[test]
    fn parallel_map_keeps_order_and_reports_first_error() {
        let items: Vec<u32> = (0..100).collect();
        let out: Result<Vec<u32>, String> = parallel_map(&items, 8, |x| Ok(x * 2));
        assert_eq!(out.unwrap(), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        let err: Result<Vec<u32>, u32> = parallel_map(&items, 8, |&x| if x % 30 == 29 { Err(x) } else { Ok(x) });
        assert_eq!(err.unwrap_err(), 29);
    }
}
