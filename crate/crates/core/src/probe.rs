//! Prompt sensitivity: paraphrase a prompt, score every paraphrase, embed
//! them, and estimate a probabilistic Lipschitz constant of accuracy with
//! respect to embedding distance.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accuracy::Accuracy;
use crate::data::Dataset;
use crate::evaluator::{evaluate_dataset, EvalError};
use crate::gateway::{ChatMessage, GatewayError, Llm, Purpose};
use crate::prompt::SectionedPrompt;
use crate::templates::{fill, Templates};

pub const DEFAULT_PARAPHRASES: usize = 30;
pub const DEFAULT_EPSILON: f64 = 0.05;
pub const CSV_HEADER: &str = "i,j,d_x,d_f,ratio,eligible";
const MAX_EXTRA_CALLS: usize = 3;
/// Distances at or below this are treated as identical prompts.
const ZERO_DISTANCE: f64 = 1e-12;
/// Slack on the radius so that float noise does not drop pairs at exactly `r`.
const RADIUS_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe input: {0}")]
    InvalidInput(String),
    #[error("only {got} distinct paraphrases, need at least {need}")]
    InsufficientParaphrases { got: usize, need: usize },
    #[error("no pair has 0 < d_x <= {r}")]
    InsufficientSupport { r: f64 },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseSet {
    /// Index 0 is the base text.
    pub texts: Vec<String>,
    pub accuracies: Vec<Accuracy>,
    /// Unit vectors, one per text.
    pub vectors: Vec<Vec<f64>>,
}

impl ParaphraseSet {
    pub fn base(&self) -> &str {
        &self.texts[0]
    }

    pub fn paraphrases(&self) -> &[String] {
        &self.texts[1..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPair {
    pub i: usize,
    pub j: usize,
    pub d_x: f64,
    pub d_f: f64,
    /// `None` when `d_x == 0`.
    pub ratio: Option<f64>,
}

impl SensitivityPair {
    pub fn eligible(&self, r: f64) -> bool {
        self.d_x > 0.0 && self.d_x <= r + RADIUS_SLACK
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub l: f64,
    pub support: usize,
    pub r: f64,
    pub epsilon: f64,
    pub pairs: Vec<SensitivityPair>,
    pub set: ParaphraseSet,
}

impl SensitivityReport {
    pub fn to_csv(&self) -> String {
        pairs_csv(&self.pairs, self.r)
    }
}

fn numbered_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\d+\s*[.)]\s*(.*?)\s*$").expect("static regex"))
}

/// Items of a numbered list; a reply with no numbered lines is read as one
/// item per nonempty line.
pub fn parse_list(reply: &str) -> Vec<String> {
    let numbered: Vec<String> = reply
        .lines()
        .filter_map(|l| numbered_re().captures(l).map(|c| c[1].to_string()))
        .filter(|s| !s.is_empty())
        .collect();
    if !numbered.is_empty() {
        return numbered;
    }
    reply.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect()
}

pub fn paraphrase(base: &str, n: usize, expert: &Llm, templates: &Templates) -> Result<Vec<String>, ProbeError> {
    if n == 0 {
        return Err(ProbeError::InvalidInput("paraphrase count must be at least 1".into()));
    }
    let mut seen: HashSet<String> = HashSet::from([base.trim().to_string()]);
    let mut out: Vec<String> = Vec::new();
    for call in 0..=MAX_EXTRA_CALLS {
        let missing = n - out.len();
        let user = if out.is_empty() {
            format!("# Sentence\n{base}")
        } else {
            let done: String = out.iter().enumerate().map(|(i, p)| format!("{}. {p}\n", i + 1)).collect();
            format!("# Sentence\n{base}\n\n# Already produced, do not repeat\n{}", done.trim_end())
        };
        let reply = expert.chat(
            Purpose::ExpertParaphrase,
            vec![
                ChatMessage::system(fill(&templates.paraphrase, &[("n", &missing.to_string())])),
                ChatMessage::user(user),
            ],
        )?;
        for item in parse_list(&reply.text) {
            if out.len() < n && seen.insert(item.clone()) {
                out.push(item);
            }
        }
        if out.len() >= n {
            break;
        }
        log::debug!("paraphrase call {}: {} of {n} distinct so far", call + 1, out.len());
    }
    if out.len() * 2 < n {
        return Err(ProbeError::InsufficientParaphrases { got: out.len(), need: n.div_ceil(2) });
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// All pairs `i < j`.
pub fn pair_distances(set: &ParaphraseSet) -> Vec<SensitivityPair> {
    let n = set.texts.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let mut d_x = (1.0 - dot(&set.vectors[i], &set.vectors[j])).clamp(0.0, 2.0);
            if d_x <= ZERO_DISTANCE {
                d_x = 0.0;
            }
            let diff = set.accuracies[i].ratio() - set.accuracies[j].ratio();
            let d_f = (*diff.numer() as f64 / *diff.denom() as f64).abs();
            let ratio = (d_x > 0.0).then(|| d_f / d_x);
            pairs.push(SensitivityPair { i, j, d_x, d_f, ratio });
        }
    }
    pairs
}

/// Lower median of `d_x` over all pairs.
pub fn default_radius(pairs: &[SensitivityPair]) -> Option<f64> {
    let mut d: Vec<f64> = pairs.iter().map(|p| p.d_x).collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[(d.len() - 1) / 2])
}

/// Nearest-rank `(1 - epsilon)` quantile of `d_f / d_x` over pairs with
/// `0 < d_x <= r`. Returns `(L, support)`.
pub fn estimate_l(pairs: &[SensitivityPair], r: f64, epsilon: f64) -> Result<(f64, usize), ProbeError> {
    if r.is_nan() || r <= 0.0 {
        return Err(ProbeError::InvalidInput(format!("radius {r} must be positive")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ProbeError::InvalidInput(format!("epsilon {epsilon} must lie in (0, 1)")));
    }
    let mut ratios: Vec<f64> = pairs.iter().filter(|p| p.eligible(r)).filter_map(|p| p.ratio).collect();
    if ratios.is_empty() {
        return Err(ProbeError::InsufficientSupport { r });
    }
    ratios.sort_by(f64::total_cmp);
    let m = ratios.len();
    let rank = (((1.0 - epsilon) * m as f64) - 1e-9).ceil().clamp(1.0, m as f64) as usize;
    Ok((ratios[rank - 1], m))
}

/// Share of eligible pairs with `d_f <= L * d_x`.
pub fn coverage(pairs: &[SensitivityPair], r: f64, l: f64) -> f64 {
    let eligible: Vec<&SensitivityPair> = pairs.iter().filter(|p| p.eligible(r)).collect();
    if eligible.is_empty() {
        return 0.0;
    }
    let ok = eligible.iter().filter(|p| p.d_f <= l * p.d_x + 1e-12).count();
    ok as f64 / eligible.len() as f64
}

pub fn pairs_csv(pairs: &[SensitivityPair], r: f64) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for p in pairs {
        let ratio = p.ratio.map(|x| format!("{x:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:.6},{:.6},{},{}", p.i, p.j, p.d_x, p.d_f, ratio, u8::from(p.eligible(r)));
    }
    s
}

/// Text that gets paraphrased: the content of a single-section prompt, or
/// the full rendering otherwise.
pub fn base_text(prompt: &SectionedPrompt) -> String {
    match prompt.sections() {
        [only] if only.subsections().is_empty() => only.content().to_string(),
        _ => prompt.render(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeParams {
    pub n: usize,
    /// Lower median of all pair distances when `None`.
    pub r: Option<f64>,
    pub epsilon: f64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self { n: DEFAULT_PARAPHRASES, r: None, epsilon: DEFAULT_EPSILON }
    }
}

/// Paraphrase, score each text as a one-section prompt, embed, estimate.
pub fn probe(
    base_prompt: &SectionedPrompt,
    validation: &Dataset,
    params: ProbeParams,
    solver: &Llm,
    expert: &Llm,
    embedder: &Llm,
    templates: &Templates,
) -> Result<SensitivityReport, ProbeError> {
    if validation.is_empty() {
        return Err(ProbeError::InvalidInput("validation set is empty".into()));
    }
    let base = base_text(base_prompt);
    let mut texts = vec![base.clone()];
    texts.extend(paraphrase(&base, params.n, expert, templates)?);

    let mut accuracies = Vec::with_capacity(texts.len());
    for t in &texts {
        let prompt = SectionedPrompt::from_description(t).map_err(|e| ProbeError::InvalidInput(e.to_string()))?;
        accuracies.push(evaluate_dataset(&prompt, validation, solver)?.accuracy);
    }
    let vectors = embedder.embed(&texts)?;
    let set = ParaphraseSet { texts, accuracies, vectors };
    let pairs = pair_distances(&set);
    let r = match params.r {
        Some(r) => r,
        None => default_radius(&pairs).ok_or(ProbeError::InsufficientSupport { r: 0.0 })?,
    };
    let (l, support) = estimate_l(&pairs, r, params.epsilon)?;
    debug_assert!(coverage(&pairs, r, l) >= 1.0 - params.epsilon - 1e-12);
    Ok(SensitivityReport { l, support, r, epsilon: params.epsilon, pairs, set })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ScriptEntry, ScriptedBackend};

    fn pair(d_x: f64, d_f: f64) -> SensitivityPair {
        SensitivityPair { i: 0, j: 1, d_x, d_f, ratio: (d_x > 0.0).then(|| d_f / d_x) }
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn distances() {
        let set = ParaphraseSet {
            texts: vec!["a".into(), "b".into(), "c".into()],
            accuracies: vec![Accuracy::new(1, 4), Accuracy::new(1, 4), Accuracy::new(3, 4)],
            vectors: vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        let p = pair_distances(&set);
        assert_eq!(p.len(), 3);
        assert_eq!((p[0].d_x, p[0].ratio), (0.0, None));
        assert_eq!((p[1].d_x, p[1].d_f, p[1].ratio), (1.0, 0.5, Some(0.5)));
    }

    #[test]
    fn pair_count_for_31_texts() {
        let set = ParaphraseSet {
            texts: (0..31).map(|i| i.to_string()).collect(),
            accuracies: vec![Accuracy::new(1, 2); 31],
            vectors: (0..31).map(|i| unit(&[1.0, i as f64])).collect(),
        };
        assert_eq!(pair_distances(&set).len(), 465);
    }

    #[test]
    fn estimate_examples() {
        assert_eq!(estimate_l(&[pair(0.1, 0.0), pair(0.2, 0.0)], 0.5, 0.05).unwrap(), (0.0, 2));
        assert_eq!(estimate_l(&[pair(0.5, 0.25)], 0.5, 0.05).unwrap(), (0.5, 1));
        assert!(matches!(estimate_l(&[pair(0.0, 0.3)], 0.5, 0.05), Err(ProbeError::InsufficientSupport { .. })));
        assert!(matches!(estimate_l(&[pair(0.9, 0.3)], 0.5, 0.05), Err(ProbeError::InsufficientSupport { .. })));
    }

    #[test]
    fn nearest_rank_by_hand() {
        // 20 eligible ratios 0.05, 0.10, ..., 1.00: rank ceil(0.95 * 20) = 19
        let pairs: Vec<_> = (1..=20).map(|k| pair(0.1, 0.1 * k as f64 * 0.05)).collect();
        let (l, support) = estimate_l(&pairs, 0.1, 0.05).unwrap();
        assert_eq!(support, 20);
        assert!((l - 0.95).abs() < 1e-12);
        assert!(coverage(&pairs, 0.1, l) >= 0.95);
    }

    #[test]
    fn csv_format() {
        let csv = pairs_csv(&[pair(0.5, 0.25), pair(0.0, 0.0)], 0.5);
        assert_eq!(csv, "i,j,d_x,d_f,ratio,eligible\n0,1,0.500000,0.250000,0.500000,1\n0,1,0.000000,0.000000,,0\n");
    }

    #[test]
    fn parse_list_forms() {
        assert_eq!(parse_list("1. a\n2) b\nnoise\n3.  c "), vec!["a", "b", "c"]);
        assert_eq!(parse_list("just one line\n"), vec!["just one line"]);
    }

    fn list(items: &[String]) -> String {
        items.iter().enumerate().map(|(i, s)| format!("{}. {s}", i + 1)).collect::<Vec<_>>().join("\n")
    }

    #[test]
    fn thirty_paraphrases() {
        let items: Vec<String> = (0..30).map(|i| format!("variant {i}")).collect();
        let expert =
            Llm::standalone(ScriptedBackend::new(vec![ScriptEntry::regex("^# Sentence", list(&items))]).unwrap(), "e");
        assert_eq!(paraphrase("base", 30, &expert, &Templates::default()).unwrap(), items);
        assert_eq!(expert.ledger().snapshot().get(Purpose::ExpertParaphrase), 1);
    }

    #[test]
    fn single_paraphrase() {
        let expert =
            Llm::standalone(ScriptedBackend::new(vec![ScriptEntry::regex(".", "Only this one.")]).unwrap(), "e");
        assert_eq!(paraphrase("base", 1, &expert, &Templates::default()).unwrap(), vec!["Only this one."]);
    }

    #[test]
    fn duplicates_trigger_retry() {
        let mut items: Vec<String> = (0..28).map(|i| format!("variant {i}")).collect();
        items.push("variant 0".into());
        items.push("variant 1".into());
        let extra = vec!["fresh a".to_string(), "fresh b".to_string()];
        let expert = Llm::standalone(
            ScriptedBackend::new(vec![
                ScriptEntry::regex("# Already produced", list(&extra)),
                ScriptEntry::regex("^# Sentence", list(&items)),
            ])
            .unwrap(),
            "e",
        );
        let out = paraphrase("base", 30, &expert, &Templates::default()).unwrap();
        assert_eq!(out.len(), 30);
        assert_eq!(out[28..], extra[..]);
        assert_eq!(expert.ledger().snapshot().get(Purpose::ExpertParaphrase), 2);
    }

    #[test]
    fn too_few_paraphrases() {
        let expert =
            Llm::standalone(ScriptedBackend::new(vec![ScriptEntry::regex(".", "1. same\n2. same")]).unwrap(), "e");
        assert!(matches!(
            paraphrase("base", 4, &expert, &Templates::default()),
            Err(ProbeError::InsufficientParaphrases { got: 1, need: 2 })
        ));
        assert_eq!(expert.ledger().snapshot().get(Purpose::ExpertParaphrase), 4);
    }

    #[test]
    fn base_text_of_prompts() {
        let p = SectionedPrompt::from_description("Classify it.").unwrap();
        assert_eq!(base_text(&p), "Classify it.");
    }
}
