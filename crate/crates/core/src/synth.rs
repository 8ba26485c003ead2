//! Synthetic multi-facet tasks with an oracle solver and a scripted expert,
//! so the whole optimization loop runs offline and deterministically.
//!
//! Every question carries a `[Topic: <label>]` tag and a hex nonce. The gold
//! letter is a hash of the nonce. [`KeywordOracle`] answers a question
//! correctly exactly when the system prompt contains its facet's keyword.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accuracy::Accuracy;
use crate::data::{Choice, Dataset, Example, Splits};
use crate::evaluator::solver_messages;
use crate::gateway::{
    approx_tokens, cache_key, ChatRequest, ChatResponse, GatewayError, LlmBackend, Purpose, Role, ScriptEntry,
};
use crate::prompt::SectionedPrompt;
use crate::rng::{derive_seed, SplitMix64};

pub const TOPIC_LABELS: [&str; 10] = [
    "astronomy",
    "botany",
    "chemistry",
    "geology",
    "zoology",
    "optics",
    "genetics",
    "ecology",
    "meteorology",
    "mineralogy",
];

const LETTERS: [&str; 4] = ["A", "B", "C", "D"];
const KEYWORD_LEN: usize = 8;
const GOLD_TAG: u64 = 0x676f_6c64;
const KEYWORD_TAG: u64 = 0x6b65_7977;
pub const GENERIC_GUIDANCE: &str = "Read each question carefully and compare every option before answering.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Facet {
    pub keyword: String,
    pub topic_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacetedTaskSpec {
    pub facets: Vec<Facet>,
    pub examples_per_facet: usize,
    pub seed: u64,
}

impl FacetedTaskSpec {
    /// `facets` facets with seeded random keywords and the fixed topic labels.
    pub fn new(facets: usize, examples_per_facet: usize, seed: u64) -> Result<Self, SynthError> {
        if facets > TOPIC_LABELS.len() {
            return Err(SynthError::InvalidSpec(format!("at most {} facets", TOPIC_LABELS.len())));
        }
        let mut rng = SplitMix64::new(derive_seed(seed, &[KEYWORD_TAG]));
        let mut keywords = BTreeSet::new();
        let mut out = Vec::with_capacity(facets);
        while out.len() < facets {
            let kw = random_keyword(&mut rng);
            if keywords.insert(kw.clone()) {
                out.push(Facet { keyword: kw, topic_label: TOPIC_LABELS[out.len()].to_string() });
            }
        }
        let spec = Self { facets: out, examples_per_facet, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.facets.len() < 2 {
            return Err(SynthError::InvalidSpec("need at least 2 facets".into()));
        }
        if self.facets.len() > TOPIC_LABELS.len() {
            return Err(SynthError::InvalidSpec(format!("at most {} facets", TOPIC_LABELS.len())));
        }
        if self.examples_per_facet == 0 {
            return Err(SynthError::InvalidSpec("examples_per_facet must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for f in &self.facets {
            if f.keyword.is_empty() || !f.keyword.bytes().all(|b| b.is_ascii_alphanumeric()) {
                return Err(SynthError::InvalidSpec(format!("keyword {:?} is not one alphanumeric token", f.keyword)));
            }
            if !f.topic_label.bytes().all(|b| b.is_ascii_alphanumeric()) {
                return Err(SynthError::InvalidSpec(format!(
                    "label {:?} is not one alphanumeric token",
                    f.topic_label
                )));
            }
            if !seen.insert(f.keyword.to_lowercase()) {
                return Err(SynthError::InvalidSpec(format!("duplicate keyword {:?}", f.keyword)));
            }
        }
        let labels: BTreeSet<&str> = self.facets.iter().map(|f| f.topic_label.as_str()).collect();
        if labels.len() != self.facets.len() {
            return Err(SynthError::InvalidSpec("duplicate topic label".into()));
        }
        Ok(())
    }

    pub fn facet_of_label(&self, label: &str) -> Option<usize> {
        self.facets.iter().position(|f| f.topic_label == label)
    }

    pub fn keywords(&self) -> Vec<&str> {
        self.facets.iter().map(|f| f.keyword.as_str()).collect()
    }

    pub fn task_description(&self) -> String {
        "Answer the multiple-choice question with the letter of the correct option.".to_string()
    }
}

fn random_keyword(rng: &mut SplitMix64) -> String {
    const FIRST: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
    const REST: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let mut s = String::with_capacity(KEYWORD_LEN);
    s.push(FIRST[rng.below(FIRST.len())] as char);
    while s.len() < KEYWORD_LEN {
        s.push(REST[rng.below(REST.len())] as char);
    }
    s
}

fn gold_index(nonce: u64) -> usize {
    (derive_seed(nonce, &[GOLD_TAG]) % LETTERS.len() as u64) as usize
}

fn question_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[Topic: ([A-Za-z0-9]+)\] Item ([0-9a-f]{16})").expect("static regex"))
}

/// `|facets| × examples_per_facet` multiple-choice examples, facet-major.
pub fn generate(spec: &FacetedTaskSpec) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let mut examples = Vec::with_capacity(spec.facets.len() * spec.examples_per_facet);
    for (k, facet) in spec.facets.iter().enumerate() {
        for i in 0..spec.examples_per_facet {
            let nonce = derive_seed(spec.seed, &[k as u64, i as u64]);
            let label = &facet.topic_label;
            examples.push(Example {
                id: format!("f{k}-{i:04}"),
                question: format!("[Topic: {label}] Item {nonce:016x}: which option fits this {label} item?"),
                choices: Some(
                    LETTERS
                        .iter()
                        .enumerate()
                        .map(|(j, l)| Choice { label: l.to_string(), text: format!("{label} option {}", j + 1) })
                        .collect(),
                ),
                gold_answer: LETTERS[gold_index(nonce)].to_string(),
                topic_hint: Some(label.clone()),
            });
        }
    }
    Dataset::from_examples(examples).map_err(|e| SynthError::InvalidSpec(e.to_string()))
}

fn covers(rendered_lower: &str, facet: &Facet) -> bool {
    rendered_lower.contains(&facet.keyword.to_lowercase())
}

/// Accuracy by direct rule application, with no backend involved.
pub fn oracle_accuracy(prompt: &SectionedPrompt, dataset: &Dataset, spec: &FacetedTaskSpec) -> Accuracy {
    let rendered = prompt.render().to_lowercase();
    let correct = dataset
        .examples
        .iter()
        .filter(|e| {
            e.topic_hint
                .as_deref()
                .and_then(|l| spec.facet_of_label(l))
                .is_some_and(|k| covers(&rendered, &spec.facets[k]))
        })
        .count();
    Accuracy::new(correct as u64, dataset.len() as u64)
}

/// Solver backend implementing the keyword rule. Questions without a topic
/// tag get answer `A`.
#[derive(Debug, Clone)]
pub struct KeywordOracle {
    spec: FacetedTaskSpec,
}

impl KeywordOracle {
    pub fn new(spec: FacetedTaskSpec) -> Self {
        Self { spec }
    }

    pub fn answer(&self, system: &str, question: &str) -> String {
        let Some(caps) = question_re().captures(question) else {
            return "No topic found.\nAnswer: A".into();
        };
        let (Some(k), Ok(nonce)) = (self.spec.facet_of_label(&caps[1]), u64::from_str_radix(&caps[2], 16)) else {
            return "Unknown topic.\nAnswer: A".into();
        };
        let gold = gold_index(nonce);
        if covers(&system.to_lowercase(), &self.spec.facets[k]) {
            format!("The guidance applies to this item.\nAnswer: {}", LETTERS[gold])
        } else {
            format!(
                "No specific guidance, picking the most familiar option.\nAnswer: {}",
                LETTERS[(gold + 1) % LETTERS.len()]
            )
        }
    }
}

impl LlmBackend for KeywordOracle {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let system: String = request
            .messages
            .iter()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let question = request.last_user_message().unwrap_or("");
        let text = self.answer(&system, question);
        Ok(ChatResponse {
            prompt_tokens: request.messages.iter().map(|m| approx_tokens(&m.content)).sum(),
            completion_tokens: approx_tokens(&text),
            text,
            from_cache: false,
        })
    }
}

fn nonempty_subsets(n: usize, max_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (1u32..(1 << n))
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect::<Vec<_>>())
        .filter(|s| s.len() <= max_size)
        .collect();
    // largest first, then lexicographic
    out.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    out
}

fn exact_list_rule(header: &str, items: &[String], response_label: impl Fn(usize) -> String) -> ScriptEntry {
    let body: Vec<String> =
        items.iter().enumerate().map(|(i, s)| format!("{}\\. {}", i + 1, fancy_regex::escape(s))).collect();
    let pattern = format!("(?s){}\\n{}$", fancy_regex::escape(header), body.join("\\n"));
    let reply: Vec<String> =
        (0..items.len()).map(|i| format!("{} -> {}: {}", i + 1, i + 1, response_label(i))).collect();
    ScriptEntry::regex(pattern, reply.join("\n"))
}

pub fn facet_edit_block(facet: &Facet) -> String {
    format!(
        "<<EDIT action=add level=section section=\"Guidance {kw}\">>\nFor {label} questions, apply rule {kw}.\n<<END>>",
        kw = facet.keyword,
        label = facet.topic_label
    )
}

pub fn generic_edit_block() -> String {
    format!("<<EDIT action=edit level=section section=\"Introduction\">>\n{GENERIC_GUIDANCE}\n<<END>>")
}

/// Diagnosis reply used for the feedback clustering of facet `label`.
pub fn diagnosis_for(label: &str) -> String {
    format!("Add a section covering {label} questions.")
}

/// Largest combine subset scripted explicitly.
const MAX_COMBINE_SUBSET: usize = 4;

/// Expert script for `spec`, in matching order:
///
/// 1. sub-topic labelling, one rule per facet
/// 2. sub-topic grouping, one exact rule per subset of labels
/// 3. per-example diagnosis for feedback clustering
/// 4. feedback grouping, one exact rule per subset of diagnoses
/// 5. mini-batch feedback: mixed-facet mini-batches get a generic edit,
///    single-facet ones an add block carrying the facet keyword
/// 6. combine: the largest set of keywords present is merged into one add
///    block, otherwise a generic edit
pub fn scripted_expert_for(spec: &FacetedTaskSpec) -> Vec<ScriptEntry> {
    let n = spec.facets.len();
    let label = |k: usize| spec.facets[k].topic_label.as_str();
    let topic = |k: usize| format!("\\[Topic: {}\\]", label(k));
    let mut rules = Vec::new();

    for k in 0..n {
        rules.push(ScriptEntry::regex(format!("(?s)# Question to categorize\\n.*{}", topic(k)), label(k)));
    }
    let mut by_label: Vec<usize> = (0..n).collect();
    by_label.sort_by_key(|k| label(*k).to_string());
    for subset in nonempty_subsets(n, n) {
        let ks: Vec<usize> = subset.iter().map(|i| by_label[*i]).collect();
        let items: Vec<String> = ks.iter().map(|k| label(*k).to_string()).collect();
        rules.push(exact_list_rule("# Sub-topics to group", &items, |i| items[i].clone()));
    }

    for k in 0..n {
        rules.push(ScriptEntry::regex(
            format!("(?s)# Incorrect example to diagnose\\n.*{}", topic(k)),
            diagnosis_for(label(k)),
        ));
    }
    for subset in nonempty_subsets(n, n) {
        let ks: Vec<usize> = subset.iter().map(|i| by_label[*i]).collect();
        // the clusterer strips the trailing period before grouping
        let items: Vec<String> =
            ks.iter().map(|k| diagnosis_for(label(*k)).trim_end_matches('.').to_string()).collect();
        let labels: Vec<String> = ks.iter().map(|k| label(*k).to_string()).collect();
        rules.push(exact_list_rule("# Feedbacks to group", &items, |i| labels[i].clone()));
    }

    for a in 0..n {
        for b in a + 1..n {
            rules.push(ScriptEntry::regex(
                format!("(?s)# Incorrectly answered questions\\n(?=.*{})(?=.*{})", topic(a), topic(b)),
                format!("The mistakes span several topics.\n{}", generic_edit_block()),
            ));
        }
    }
    for (k, facet) in spec.facets.iter().enumerate() {
        rules.push(ScriptEntry::regex(
            format!("(?s)# Incorrectly answered questions\\n.*{}", topic(k)),
            format!("The {} questions need a dedicated rule.\n{}", label(k), facet_edit_block(facet)),
        ));
    }

    for subset in nonempty_subsets(n, MAX_COMBINE_SUBSET.min(n)) {
        let lookaheads: String = subset.iter().map(|k| format!("(?=.*\\b{}\\b)", spec.facets[*k].keyword)).collect();
        let kws: Vec<&str> = subset.iter().map(|k| spec.facets[*k].keyword.as_str()).collect();
        let labels: Vec<&str> = subset.iter().map(|k| label(*k)).collect();
        rules.push(ScriptEntry::regex(
            format!("(?s)# Mini-batch feedback\\n(?!.*# Mini-batch feedback\\n){lookaheads}"),
            format!(
                "<<EDIT action=add level=section section=\"Guidance {}\">>\nFor {} questions, apply rules {}.\n<<END>>",
                kws.join(" "),
                labels.join(", "),
                kws.join(", ")
            ),
        ));
    }
    rules.push(ScriptEntry::regex("(?s)# Mini-batch feedback\\n", generic_edit_block()));
    rules
}

/// Train, validation and test splits of one generated task. Each facet
/// contributes `per_facet` training examples and `max(1, per_facet / 2)`
/// examples to each of validation and test, all under the same keywords.
pub fn generate_splits(facets: usize, per_facet: usize, seed: u64) -> Result<(FacetedTaskSpec, Splits), SynthError> {
    if per_facet == 0 {
        return Err(SynthError::InvalidSpec("per_facet must be positive".into()));
    }
    let held = (per_facet / 2).max(1);
    let spec = FacetedTaskSpec::new(facets, per_facet + 2 * held, seed)?;
    let all = generate(&spec)?;
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, e) in all.examples.iter().enumerate() {
        let pos = i % spec.examples_per_facet;
        let target = if pos < per_facet {
            &mut train
        } else if pos < per_facet + held {
            &mut validation
        } else {
            &mut test
        };
        target.push(e.clone());
    }
    let splits = Splits { train: all.subset(train), validation: all.subset(validation), test: all.subset(test) };
    Ok((spec, splits))
}

const SLOPE_ITEMS: u64 = 100;

/// Probe fixture with a known slope. Paraphrase `i` sits at cosine distance
/// `d_i` from the base text and its validation accuracy differs from the
/// base by `slope * d_i`. Paraphrases are farther from each other than
/// `radius`, so only base pairs are eligible and the estimate is `slope`.
#[derive(Debug, Clone)]
pub struct SlopeFixture {
    pub slope: f64,
    pub base: String,
    pub paraphrases: Vec<String>,
    /// Index 0 is the base text.
    pub accuracies: Vec<Accuracy>,
    pub embeddings: BTreeMap<String, Vec<f64>>,
    pub validation: Dataset,
    pub radius: f64,
}

impl SlopeFixture {
    /// `slope` must be 0 or lie in `[0.7, 1.0]`.
    pub fn new(slope: f64, n: usize) -> Result<Self, SynthError> {
        if !(slope == 0.0 || (0.7..=1.0).contains(&slope)) {
            return Err(SynthError::InvalidSpec(format!("slope {slope} outside {{0}} and [0.7, 1]")));
        }
        if n < 2 {
            return Err(SynthError::InvalidSpec("need at least 2 paraphrases".into()));
        }
        let base = "Answer the question with the letter of the correct option.".to_string();
        let paraphrases: Vec<String> =
            (1..=n).map(|i| format!("Reply with the letter of the right option, variant {i}.")).collect();
        let half = SLOPE_ITEMS / 2;
        let mut accuracies = vec![Accuracy::new(half, SLOPE_ITEMS)];
        let mut embeddings = BTreeMap::new();
        let mut base_vec = vec![0.0; n + 1];
        base_vec[0] = 1.0;
        embeddings.insert(base.clone(), base_vec);
        let mut radius = 0.0f64;
        for (i, text) in paraphrases.iter().enumerate() {
            let step = 16 + (i as u64 % 9);
            let (d, correct) = if slope == 0.0 {
                (0.2 + 0.01 * (i % 9) as f64, half)
            } else {
                let correct = if i % 2 == 0 { half + step } else { half - step };
                (step as f64 / (SLOPE_ITEMS as f64 * slope), correct)
            };
            radius = radius.max(d);
            accuracies.push(Accuracy::new(correct, SLOPE_ITEMS));
            let cos = 1.0 - d;
            let mut v = vec![0.0; n + 1];
            v[0] = cos;
            v[i + 1] = (1.0 - cos * cos).sqrt();
            embeddings.insert(text.clone(), v);
        }
        let examples = (0..SLOPE_ITEMS)
            .map(|i| Example {
                id: format!("v{i:03}"),
                question: format!("Sensitivity item {i}: which option is listed first?"),
                choices: Some(
                    LETTERS.iter().map(|l| Choice { label: l.to_string(), text: format!("option {l}") }).collect(),
                ),
                gold_answer: "A".into(),
                topic_hint: None,
            })
            .collect();
        let validation = Dataset::from_examples(examples).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        Ok(Self { slope, base, paraphrases, accuracies, embeddings, validation, radius })
    }

    pub fn base_prompt(&self) -> SectionedPrompt {
        SectionedPrompt::from_description(&self.base).expect("fixture base is a valid description")
    }

    /// Paraphrase requests get the full numbered list.
    pub fn expert_script(&self) -> Vec<ScriptEntry> {
        let list: Vec<String> = self.paraphrases.iter().enumerate().map(|(i, p)| format!("{}. {p}", i + 1)).collect();
        vec![ScriptEntry::regex("^# Sentence\\n", list.join("\n"))]
    }

    /// Exact solver entries for every (text, item): the first `correct`
    /// items are answered `A`, the rest `B`.
    pub fn solver_script(&self, model_id: &str) -> Vec<ScriptEntry> {
        let texts = std::iter::once(&self.base).chain(&self.paraphrases);
        let mut out = Vec::new();
        for (text, acc) in texts.zip(&self.accuracies) {
            let prompt = SectionedPrompt::from_description(text).expect("fixture text is a valid description");
            for (k, e) in self.validation.examples.iter().enumerate() {
                let request = ChatRequest::new(model_id, solver_messages(&prompt, e), Purpose::Solver);
                let letter = if (k as u64) < acc.correct { "A" } else { "B" };
                out.push(ScriptEntry::exact(cache_key(&request).0, format!("Answer: {letter}")));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_jsonl, save_jsonl, AnswerKind};
    use crate::evaluator::evaluate;
    use crate::gateway::{ChatMessage, Llm, Purpose, ScriptedBackend};
    use crate::prompt::{EditProposal, Section};

    fn spec() -> FacetedTaskSpec {
        FacetedTaskSpec::new(5, 40, 7).unwrap()
    }

    #[test]
    fn sizes_and_determinism() {
        let s = spec();
        let d = generate(&s).unwrap();
        assert_eq!(d.len(), 200);
        assert_eq!(d.answer_kind, AnswerKind::MultipleChoice);
        assert_eq!(generate(&spec()).unwrap(), d);
        assert_ne!(generate(&FacetedTaskSpec::new(5, 40, 8).unwrap()).unwrap(), d);
        let kws = s.keywords();
        assert_eq!(kws.iter().collect::<BTreeSet<_>>().len(), 5);
        assert!(kws.iter().all(|k| k.len() == KEYWORD_LEN && k.bytes().all(|b| b.is_ascii_alphanumeric())));
    }

    #[test]
    fn jsonl_round_trip() {
        let d = generate(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_jsonl(&path, &d).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), d);
    }

    #[test]
    fn spec_validation() {
        assert!(FacetedTaskSpec::new(1, 5, 0).is_err());
        assert!(FacetedTaskSpec::new(11, 5, 0).is_err());
        let mut s = spec();
        s.facets[1].keyword = s.facets[0].keyword.to_uppercase();
        assert!(s.validate().is_err());
    }

    fn with_keywords(s: &FacetedTaskSpec, ks: &[usize]) -> SectionedPrompt {
        let mut sections = vec![Section::new("Introduction", &s.task_description()).unwrap()];
        for k in ks {
            sections.push(
                Section::new(&format!("Rule {k}"), &format!("Use {}.", s.facets[*k].keyword.to_uppercase())).unwrap(),
            );
        }
        SectionedPrompt::new(sections).unwrap()
    }

    #[test]
    fn oracle_accuracy_counts_covered_facets() {
        let s = spec();
        let d = generate(&s).unwrap();
        assert_eq!(oracle_accuracy(&with_keywords(&s, &[]), &d, &s), Accuracy::new(0, 200));
        assert_eq!(oracle_accuracy(&with_keywords(&s, &[1, 3]), &d, &s).ratio(), num_rational::Rational64::new(2, 5));
        assert!(oracle_accuracy(&with_keywords(&s, &[0, 1, 2, 3, 4]), &d, &s).is_perfect());
    }

    #[test]
    fn oracle_matches_evaluator() {
        let s = spec();
        let d = generate(&s).unwrap();
        let solver = Llm::standalone(KeywordOracle::new(s.clone()), "oracle");
        let mut rng = SplitMix64::new(3);
        for trial in 0..12 {
            let ks: Vec<usize> = (0..5).filter(|_| rng.below(2) == 1).collect();
            let p = with_keywords(&s, &ks);
            let measured = evaluate(&p, &d.examples, d.answer_kind, &solver).unwrap().accuracy;
            // brute force over the fixture, independent of oracle_accuracy
            let expected = d
                .examples
                .iter()
                .filter(|e| {
                    let k = s.facet_of_label(e.topic_hint.as_deref().unwrap()).unwrap();
                    ks.contains(&k)
                })
                .count() as u64;
            assert_eq!(measured, Accuracy::new(expected, 200), "trial {trial}");
            assert_eq!(measured, oracle_accuracy(&p, &d, &s));
        }
    }

    fn expert(s: &FacetedTaskSpec) -> Llm {
        Llm::standalone(ScriptedBackend::new(scripted_expert_for(s)).unwrap(), "expert")
    }

    fn ask(expert: &Llm, user: &str) -> String {
        expert.chat(Purpose::ExpertFeedback, vec![ChatMessage::system("x"), ChatMessage::user(user)]).unwrap().text
    }

    #[test]
    fn feedback_for_one_facet_carries_its_keyword() {
        let s = spec();
        let d = generate(&s).unwrap();
        let q = d.examples.iter().find(|e| e.id == "f2-0000").unwrap().render_question();
        let reply =
            ask(&expert(&s), &format!("# Current prompt\nfoo\n\n# Incorrectly answered questions\n## Question 1\n{q}"));
        let edits = crate::prompt::parse_edits(&reply).unwrap();
        assert_eq!(edits.len(), 1);
        assert!(edits[0].content.as_deref().unwrap().contains(&s.facets[2].keyword));
    }

    #[test]
    fn mixed_minibatch_gets_generic_edit() {
        let s = spec();
        let reply =
            ask(&expert(&s), "# Incorrectly answered questions\n[Topic: astronomy] Item 0\n[Topic: geology] Item 1");
        assert_eq!(
            crate::prompt::parse_edits(&reply).unwrap(),
            vec![EditProposal::edit_section("Introduction", GENERIC_GUIDANCE)]
        );
    }

    #[test]
    fn combine_merges_keywords() {
        let s = spec();
        let (a, b) = (&s.facets[0], &s.facets[3]);
        let user = format!(
            "# Current prompt\n{}\n\n# Mini-batch feedback\n## Feedback 1\n{}\n\n## Feedback 2\n{}",
            s.facets[4].keyword,
            facet_edit_block(a),
            facet_edit_block(b)
        );
        let edits = crate::prompt::parse_edits(&ask(&expert(&s), &user)).unwrap();
        assert_eq!(edits.len(), 1);
        let content = edits[0].content.as_deref().unwrap();
        assert!(content.contains(&a.keyword) && content.contains(&b.keyword));
        assert!(!content.contains(&s.facets[4].keyword));
    }

    #[test]
    fn grouping_rules_are_exact() {
        let s = spec();
        let e = expert(&s);
        assert_eq!(ask(&e, "# Sub-topics to group\n1. botany\n2. geology"), "1 -> 1: botany\n2 -> 2: geology");
        assert_eq!(ask(&e, "# Feedbacks to group\n1. Add a section covering zoology questions"), "1 -> 1: zoology");
    }

    #[test]
    fn subsets_largest_first() {
        let s = nonempty_subsets(3, 3);
        assert_eq!(s.len(), 7);
        assert_eq!(s[0], vec![0, 1, 2]);
        assert_eq!(s.last().unwrap(), &vec![2]);
        assert!(nonempty_subsets(5, 2).iter().all(|x| x.len() <= 2));
    }

    #[test]
    fn splits_share_keywords_and_partition_ids() {
        let (spec, splits) = generate_splits(5, 40, 7).unwrap();
        assert_eq!((splits.train.len(), splits.validation.len(), splits.test.len()), (200, 100, 100));
        assert_eq!(spec.keywords(), FacetedTaskSpec::new(5, 1, 7).unwrap().keywords());
        let mut ids: Vec<&str> = splits
            .train
            .examples
            .iter()
            .chain(&splits.validation.examples)
            .chain(&splits.test.examples)
            .map(|e| e.id.as_str())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 400);
        for d in [&splits.train, &splits.validation, &splits.test] {
            for f in &spec.facets {
                let n = d.examples.iter().filter(|e| e.topic_hint.as_deref() == Some(f.topic_label.as_str())).count();
                assert_eq!(n * 5, d.len());
            }
        }
    }

    #[test]
    fn slope_fixture_geometry() {
        let fx = SlopeFixture::new(0.8, 30).unwrap();
        let base = &fx.embeddings[&fx.base];
        for (i, p) in fx.paraphrases.iter().enumerate() {
            let v = &fx.embeddings[p];
            let norm: f64 = v.iter().map(|x| x * x).sum();
            assert!((norm - 1.0).abs() < 1e-12);
            let d_x = 1.0 - v.iter().zip(base).map(|(a, b)| a * b).sum::<f64>();
            let d_f = (fx.accuracies[i + 1].as_f64() - fx.accuracies[0].as_f64()).abs();
            assert!((d_f / d_x - 0.8).abs() < 1e-9);
            assert!(d_x <= fx.radius + 1e-12);
        }
        assert!(SlopeFixture::new(0.5, 30).is_err());
        assert_eq!(fx.solver_script("m").len(), 31 * 100);
    }
}
