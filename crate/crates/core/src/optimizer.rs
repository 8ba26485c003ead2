//! The training loop: clustered batches, two-tier feedback, beam or greedy
//! selection, per-epoch validation, early stopping and reclustering.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::accuracy::Accuracy;
use crate::clustering::{batches, feedback_cluster, topic_cluster, Batch, ClusterError, ClusterMap, ClusterMode};
use crate::data::{AnswerKind, Dataset, Example};
use crate::evaluator::{evaluate, EvalError, Prediction};
use crate::feedback::{combine, minibatch_feedback, HistoryEntry, HistoryLedger, Outcome};
use crate::gateway::{GatewayError, LedgerSnapshot, Llm};
use crate::prompt::{parse_prompt, PromptError, SectionedPrompt};
use crate::rng::{derive_seed, SplitMix64};
use crate::templates::Templates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Beam,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub mode: Mode,
    pub clustering: ClusterMode,
    pub clusters: usize,
    pub batch_size: usize,
    pub minibatch_size: usize,
    pub max_epochs: u32,
    pub early_stop_patience: usize,
    /// 0 disables reclustering.
    pub recluster_every: u32,
    pub holdout_size: usize,
    /// 0 disables the edit history.
    pub history_capacity: usize,
    pub greedy_on_validation: bool,
    pub seed: u64,
    pub task_description: String,
    pub templates: Templates,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Beam,
            clustering: ClusterMode::Topic,
            clusters: 5,
            batch_size: 7,
            minibatch_size: 5,
            max_epochs: 20,
            early_stop_patience: 3,
            recluster_every: 3,
            holdout_size: 3,
            history_capacity: 20,
            greedy_on_validation: false,
            seed: 0,
            task_description: String::new(),
            templates: Templates::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.minibatch_size == 0 {
            return Err("minibatch_size must be at least 1".into());
        }
        if self.minibatch_size > self.batch_size {
            return Err(format!(
                "minibatch_size ({}) must not exceed batch_size ({})",
                self.minibatch_size, self.batch_size
            ));
        }
        if self.early_stop_patience == 0 {
            return Err("early_stop_patience must be at least 1".into());
        }
        if self.clusters == 0 {
            return Err("clusters must be at least 1".into());
        }
        if self.task_description.trim().is_empty() {
            return Err("task_description must not be empty".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptyData(&'static str),
    #[error("run aborted during epoch {epoch}: {cause}")]
    Aborted { epoch: u32, cause: GatewayError },
    #[error("checkpoint does not match this run: {0}")]
    Checkpoint(String),
    #[error("checkpoint sink failed: {0}")]
    Sink(#[from] std::io::Error),
}

fn abort(epoch: u32) -> impl Fn(GatewayError) -> OptimizeError {
    move |cause| OptimizeError::Aborted { epoch, cause }
}

fn eval_abort(epoch: u32) -> impl Fn(EvalError) -> OptimizeError {
    move |e| match e {
        EvalError::Gateway(cause) => OptimizeError::Aborted { epoch, cause },
        EvalError::NoExamples => OptimizeError::EmptyData("evaluation"),
    }
}

/// A prompt with its accuracy on the current acceptance set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scored {
    pub prompt: SectionedPrompt,
    pub accuracy: Accuracy,
}

impl Scored {
    pub fn new(prompt: SectionedPrompt, accuracy: Accuracy) -> Self {
        Self { prompt, accuracy }
    }
}

/// First element with the highest accuracy.
fn first_max(items: &[&Scored]) -> usize {
    let mut best = 0;
    for (i, s) in items.iter().enumerate().skip(1) {
        if s.accuracy > items[best].accuracy {
            best = i;
        }
    }
    best
}

/// Beam update from scored candidates. `p2` must be scored whenever
/// `p1 != p0`. Returns `(new_p1, new_p2)`.
///
/// `new_p2` is taken first, from the old `p1`, as the best candidate of
/// `[p1, p2, q1, q2]` other than the one chosen for `new_p1`; candidates are
/// deduplicated structurally so the two beam slots never hold the same prompt.
pub fn beam_choose(
    p0: &SectionedPrompt,
    p1: &Scored,
    p2: &Scored,
    q1: Option<&Scored>,
    q2: Option<&Scored>,
) -> (Scored, Scored) {
    let mut for_p1: Vec<&Scored> = vec![p1];
    for_p1.extend(q1);
    for_p1.extend(q2);
    let new_p1 = for_p1[first_max(&for_p1)].clone();

    let new_p2 = if p1.prompt != *p0 {
        let mut pool: Vec<&Scored> = Vec::new();
        for c in [Some(p1), Some(p2), q1, q2].into_iter().flatten() {
            if !pool.iter().any(|s| s.prompt == c.prompt) {
                pool.push(c);
            }
        }
        pool.retain(|s| s.prompt != new_p1.prompt);
        // stable: equal accuracies keep list order
        pool.sort_by_key(|s| std::cmp::Reverse(s.accuracy));
        pool.first().map_or_else(|| p2.clone(), |s| (*s).clone())
    } else {
        p2.clone()
    };
    (new_p1, new_p2)
}

/// Greedy update: `q1` replaces `p1` only on strict improvement.
pub fn greedy_choose(p1: &Scored, q1: Option<&Scored>) -> Scored {
    match q1 {
        Some(q) if q.accuracy > p1.accuracy => q.clone(),
        _ => p1.clone(),
    }
}

fn score(
    prompt: &SectionedPrompt,
    examples: &[Example],
    kind: AnswerKind,
    solver: &Llm,
) -> Result<Accuracy, EvalError> {
    Ok(evaluate(prompt, examples, kind, solver)?.accuracy)
}

/// Evaluates the candidates on `batch` and applies [`beam_choose`].
#[allow(clippy::too_many_arguments)]
pub fn beam_select(
    p0: &SectionedPrompt,
    p1: &SectionedPrompt,
    p2: &SectionedPrompt,
    q1: &SectionedPrompt,
    q2: &SectionedPrompt,
    batch: &[Example],
    kind: AnswerKind,
    solver: &Llm,
) -> Result<(SectionedPrompt, SectionedPrompt), EvalError> {
    let s = |p: &SectionedPrompt| -> Result<Scored, EvalError> {
        Ok(Scored::new(p.clone(), score(p, batch, kind, solver)?))
    };
    let (a, b) = beam_choose(p0, &s(p1)?, &s(p2)?, Some(&s(q1)?), Some(&s(q2)?));
    Ok((a.prompt, b.prompt))
}

/// Evaluates `p1` and `q1` on `acceptance` and applies [`greedy_choose`].
pub fn greedy_select(
    p1: &SectionedPrompt,
    q1: &SectionedPrompt,
    acceptance: &[Example],
    kind: AnswerKind,
    solver: &Llm,
) -> Result<SectionedPrompt, EvalError> {
    let a = Scored::new(p1.clone(), score(p1, acceptance, kind, solver)?);
    let b = Scored::new(q1.clone(), score(q1, acceptance, kind, solver)?);
    Ok(greedy_choose(&a, Some(&b)).prompt)
}

/// True once the last `patience` epochs failed to beat the best accuracy
/// seen before them.
pub fn early_stop(v: &[Accuracy], patience: usize) -> bool {
    assert!(patience >= 1, "patience must be at least 1");
    if v.len() <= patience {
        return false;
    }
    let (head, tail) = v.split_at(v.len() - patience);
    let best_before = head.iter().max().expect("nonempty head");
    let best_recent = tail.iter().max().expect("nonempty tail");
    best_recent <= best_before
}

pub fn should_recluster(epoch: u32, every: u32) -> bool {
    every > 0 && epoch.is_multiple_of(every)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Processed,
    AllCorrect,
    NoFeedback,
    NoEdit,
    ApplyFailed,
}

impl StepStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Processed => "processed",
            Self::AllCorrect => "all_correct",
            Self::NoFeedback => "no_feedback",
            Self::NoEdit => "no_edit",
            Self::ApplyFailed => "apply_failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: u32,
    pub cluster_id: usize,
    pub batch_index: usize,
    pub batch_size: usize,
    pub status: StepStatus,
    pub minibatches_with_wrong: usize,
    pub feedbacks: usize,
    pub edits: Vec<String>,
    pub p1: Accuracy,
    pub p2: Option<Accuracy>,
    pub q1: Option<Accuracy>,
    pub q2: Option<Accuracy>,
    /// The best prompt changed at this step.
    pub accepted: bool,
    /// Non-cached calls made while processing this batch.
    pub ledger: LedgerSnapshot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub validation: Accuracy,
    pub processed: usize,
    pub skipped: usize,
    pub reclustered: bool,
    /// Non-cached calls made during the epoch, including any clustering.
    pub ledger: LedgerSnapshot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: u32,
    #[serde(flatten)]
    pub entry: HistoryEntry,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Every history record, independent of the ledger's capacity.
    pub history: Vec<HistoryRecord>,
    pub clustering_disabled: bool,
    pub history_disabled: bool,
    pub initial_clusters: usize,
    /// Calls spent on the initial clustering; also counted in epoch 1.
    pub initial_ledger: LedgerSnapshot,
    pub warnings: Vec<String>,
}

impl RunLog {
    pub fn accepted_edits(&self) -> usize {
        self.steps.iter().filter(|s| s.accepted).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BestPrompt {
    pub prompt: String,
    pub validation: Accuracy,
    pub epoch: u32,
}

/// Everything needed to continue a run after the last completed epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_digest: String,
    /// Completed epochs; 0 means only the initial clustering is done.
    pub epoch: u32,
    pub finished: bool,
    pub seed: u64,
    pub p0: String,
    pub p1: String,
    pub p2: String,
    pub best: Option<BestPrompt>,
    pub val_history: Vec<Accuracy>,
    pub history: HistoryLedger,
    pub clusters: ClusterMap,
    pub wrong_pool: BTreeMap<String, Prediction>,
    pub log: RunLog,
    pub solver_ledger: LedgerSnapshot,
    pub expert_ledger: Option<LedgerSnapshot>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best_prompt: SectionedPrompt,
    pub best_validation: Option<Accuracy>,
    pub final_p1: SectionedPrompt,
    pub val_history: Vec<Accuracy>,
    pub clusters: ClusterMap,
    pub log: RunLog,
    pub checkpoint: Checkpoint,
}

struct State {
    epoch: u32,
    finished: bool,
    p0: SectionedPrompt,
    p1: SectionedPrompt,
    p2: SectionedPrompt,
    best: Option<(SectionedPrompt, Accuracy, u32)>,
    v: Vec<Accuracy>,
    history: HistoryLedger,
    clusters: ClusterMap,
    wrong_pool: BTreeMap<String, Prediction>,
    log: RunLog,
}

pub struct Optimizer<'a> {
    config: OptimizerConfig,
    train: &'a Dataset,
    validation: &'a Dataset,
    solver: &'a Llm,
    expert: &'a Llm,
    initial_prompt: Option<SectionedPrompt>,
    resume: Option<Checkpoint>,
    sink: Option<CheckpointSink<'a>>,
}

type CheckpointSink<'a> = Box<dyn FnMut(&Checkpoint) -> std::io::Result<()> + 'a>;

impl<'a> Optimizer<'a> {
    pub fn new(
        config: OptimizerConfig,
        train: &'a Dataset,
        validation: &'a Dataset,
        solver: &'a Llm,
        expert: &'a Llm,
    ) -> Self {
        Self { config, train, validation, solver, expert, initial_prompt: None, resume: None, sink: None }
    }

    /// Starts from `prompt` instead of the task description.
    pub fn initial_prompt(mut self, prompt: SectionedPrompt) -> Self {
        self.initial_prompt = Some(prompt);
        self
    }

    pub fn resume(mut self, checkpoint: Checkpoint) -> Self {
        self.resume = Some(checkpoint);
        self
    }

    /// Called with a fresh checkpoint after clustering and after every epoch.
    pub fn on_checkpoint(mut self, sink: impl FnMut(&Checkpoint) -> std::io::Result<()> + 'a) -> Self {
        self.sink = Some(Box::new(sink));
        self
    }

    fn shared_ledger(&self) -> bool {
        Arc::ptr_eq(self.solver.ledger(), self.expert.ledger())
    }

    fn ledger(&self) -> LedgerSnapshot {
        if self.shared_ledger() {
            self.solver.ledger().snapshot()
        } else {
            self.solver.ledger().snapshot().plus(&self.expert.ledger().snapshot())
        }
    }

    fn checkpoint(&self, s: &State) -> Checkpoint {
        Checkpoint {
            config_digest: self.config.digest(),
            epoch: s.epoch,
            finished: s.finished,
            seed: self.config.seed,
            p0: s.p0.render(),
            p1: s.p1.render(),
            p2: s.p2.render(),
            best: s.best.as_ref().map(|(p, a, e)| BestPrompt { prompt: p.render(), validation: *a, epoch: *e }),
            val_history: s.v.clone(),
            history: s.history.clone(),
            clusters: s.clusters.clone(),
            wrong_pool: s.wrong_pool.clone(),
            log: s.log.clone(),
            solver_ledger: self.solver.ledger().snapshot(),
            expert_ledger: (!self.shared_ledger()).then(|| self.expert.ledger().snapshot()),
        }
    }

    fn emit(&mut self, s: &State) -> Result<Checkpoint, OptimizeError> {
        let c = self.checkpoint(s);
        if let Some(sink) = self.sink.as_mut() {
            sink(&c)?;
        }
        Ok(c)
    }

    fn restore(&self, c: &Checkpoint) -> Result<State, OptimizeError> {
        if c.config_digest != self.config.digest() {
            return Err(OptimizeError::Checkpoint("configuration digest differs".into()));
        }
        let parse = |t: &str| parse_prompt(t).map_err(|e: PromptError| OptimizeError::Checkpoint(e.to_string()));
        self.solver.ledger().restore(&c.solver_ledger);
        if let Some(l) = &c.expert_ledger {
            self.expert.ledger().restore(l);
        }
        Ok(State {
            epoch: c.epoch,
            finished: c.finished,
            p0: parse(&c.p0)?,
            p1: parse(&c.p1)?,
            p2: parse(&c.p2)?,
            best: match &c.best {
                Some(b) => Some((parse(&b.prompt)?, b.validation, b.epoch)),
                None => None,
            },
            v: c.val_history.clone(),
            history: c.history.clone(),
            clusters: c.clusters.clone(),
            wrong_pool: c.wrong_pool.clone(),
            log: c.log.clone(),
        })
    }

    /// Builds clusters for `prompt`. An unusable grouping reply falls back
    /// to a single cluster.
    fn cluster(&self, prompt: &SectionedPrompt, epoch: u32, log: &mut RunLog) -> Result<ClusterMap, OptimizeError> {
        let ids = self.train.examples.iter().map(|e| e.id.as_str());
        let l = self.config.clusters;
        let t = &self.config.templates;
        let result = match self.config.clustering {
            ClusterMode::None => return Ok(ClusterMap::single(ids, ClusterMode::None, "all")),
            ClusterMode::Topic => topic_cluster(&self.train.examples, self.expert, l, t),
            ClusterMode::Feedback => {
                feedback_cluster(&self.train.examples, self.train.answer_kind, prompt, self.solver, self.expert, l, t)
            }
        };
        match result {
            Ok(map) => {
                log.warnings.extend(map.warnings.iter().map(|w| format!("epoch {epoch}: {w}")));
                Ok(map)
            }
            Err(ClusterError::Parse(preview)) => {
                let w = format!("epoch {epoch}: unusable grouping reply ({preview:?}); using one cluster");
                log::warn!("{w}");
                log.warnings.push(w);
                Ok(ClusterMap::single(ids, self.config.clustering, "all"))
            }
            Err(ClusterError::Gateway(e)) | Err(ClusterError::Eval(EvalError::Gateway(e))) => {
                Err(OptimizeError::Aborted { epoch, cause: e })
            }
            Err(e) => Err(OptimizeError::Config(e.to_string())),
        }
    }

    fn init(&self) -> Result<State, OptimizeError> {
        let p0 = match &self.initial_prompt {
            Some(p) => p.clone(),
            None => SectionedPrompt::from_description(&self.config.task_description)
                .map_err(|e| OptimizeError::Config(e.to_string()))?,
        };
        let mut log = RunLog {
            clustering_disabled: self.config.clustering == ClusterMode::None,
            history_disabled: self.config.history_capacity == 0,
            ..RunLog::default()
        };
        let clusters = if self.config.max_epochs == 0 {
            ClusterMap::single(self.train.examples.iter().map(|e| e.id.as_str()), self.config.clustering, "all")
        } else {
            self.cluster(&p0, 1, &mut log)?
        };
        log.initial_clusters = clusters.cluster_count();
        Ok(State {
            epoch: 0,
            finished: false,
            p1: p0.clone(),
            p2: p0.clone(),
            p0,
            best: None,
            v: Vec::new(),
            history: HistoryLedger::new(self.config.history_capacity),
            clusters,
            wrong_pool: BTreeMap::new(),
            log,
        })
    }

    pub fn run(mut self) -> Result<RunOutcome, OptimizeError> {
        self.config.validate().map_err(OptimizeError::Config)?;
        if self.train.is_empty() {
            return Err(OptimizeError::EmptyData("training"));
        }
        if self.validation.is_empty() {
            return Err(OptimizeError::EmptyData("validation"));
        }
        let mut state = match self.resume.take() {
            Some(c) => self.restore(&c)?,
            None => {
                // the first epoch's ledger delta includes the initial clustering
                let before = self.ledger();
                let mut s = self.init()?;
                s.log.initial_ledger = self.ledger().since(&before);
                self.emit(&s)?;
                s
            }
        };

        while !state.finished && state.epoch < self.config.max_epochs {
            let epoch = state.epoch + 1;
            let before = self.ledger();
            let stop = self.run_epoch(&mut state, epoch)?;
            state.epoch = epoch;
            state.finished = stop;
            let delta = self.ledger().since(&before);
            let carried = if epoch == 1 { state.log.initial_ledger.clone() } else { LedgerSnapshot::default() };
            if let Some(last) = state.log.epochs.last_mut() {
                last.ledger = delta.plus(&carried);
            }
            self.emit(&state)?;
        }
        state.finished = true;
        let checkpoint = self.emit(&state)?;
        let (best_prompt, best_validation) = match &state.best {
            Some((p, a, _)) => (p.clone(), Some(*a)),
            None => (state.p0.clone(), None),
        };
        Ok(RunOutcome {
            best_prompt,
            best_validation,
            final_p1: state.p1,
            val_history: state.v,
            clusters: state.clusters,
            log: state.log,
            checkpoint,
        })
    }
}

const HOLDOUT_TAG: u64 = 0x686f_6c64;

impl Optimizer<'_> {
    fn run_epoch(&self, s: &mut State, epoch: u32) -> Result<bool, OptimizeError> {
        let epoch_seed = derive_seed(self.config.seed, &[epoch as u64]);
        let plan = batches(&s.clusters, self.config.batch_size, self.config.minibatch_size, epoch_seed);
        let (mut processed, mut skipped) = (0, 0);
        for batch in &plan {
            match self.process_batch(s, epoch, epoch_seed, batch)? {
                StepStatus::Processed => processed += 1,
                _ => skipped += 1,
            }
        }
        let validation = evaluate(&s.p1, &self.validation.examples, self.validation.answer_kind, self.solver)
            .map_err(eval_abort(epoch))?
            .accuracy;
        s.v.push(validation);
        if s.best.as_ref().is_none_or(|(_, best, _)| validation > *best) {
            s.best = Some((s.p1.clone(), validation, epoch));
        }
        let stop = early_stop(&s.v, self.config.early_stop_patience) || processed == 0;
        let reclustered = !stop
            && epoch < self.config.max_epochs
            && self.config.clustering != ClusterMode::None
            && should_recluster(epoch, self.config.recluster_every);
        if reclustered {
            s.clusters = self.cluster(&s.p1, epoch, &mut s.log)?;
        }
        log::info!(
            "epoch {epoch}: validation {} ({processed} batches processed, {skipped} skipped)",
            validation.display_fraction()
        );
        s.log.epochs.push(EpochRecord {
            epoch,
            validation,
            processed,
            skipped,
            reclustered,
            ledger: LedgerSnapshot::default(),
        });
        Ok(stop)
    }

    fn example(&self, id: &str) -> Result<&Example, OptimizeError> {
        self.train
            .get(id)
            .ok_or_else(|| OptimizeError::Checkpoint(format!("cluster member {id:?} is not in the training set")))
    }

    fn holdout(&self, s: &State, batch: &Batch, epoch_seed: u64) -> Result<Vec<(Example, Prediction)>, OptimizeError> {
        if self.config.holdout_size == 0 {
            return Ok(Vec::new());
        }
        let in_batch: BTreeSet<&str> = batch.ids.iter().map(String::as_str).collect();
        let mut ids: Vec<&String> = s.wrong_pool.keys().filter(|id| !in_batch.contains(id.as_str())).collect();
        let seed = derive_seed(epoch_seed, &[batch.cluster_id as u64, batch.batch_index as u64, HOLDOUT_TAG]);
        SplitMix64::new(seed).shuffle(&mut ids);
        ids.truncate(self.config.holdout_size);
        ids.into_iter().map(|id| Ok((self.example(id)?.clone(), s.wrong_pool[id].clone()))).collect()
    }

    fn process_batch(
        &self,
        s: &mut State,
        epoch: u32,
        epoch_seed: u64,
        batch: &Batch,
    ) -> Result<StepStatus, OptimizeError> {
        let before = self.ledger();
        let kind = self.train.answer_kind;
        let examples: Vec<Example> = batch.ids.iter().map(|id| self.example(id).cloned()).collect::<Result<_, _>>()?;

        // p1 is scored on every mini-batch at once; the same predictions feed
        // the feedback step and count as p1's batch accuracy
        let report = evaluate(&s.p1, &examples, kind, self.solver).map_err(eval_abort(epoch))?;
        let predictions: BTreeMap<&str, &Prediction> =
            report.predictions.iter().map(|p| (p.example_id.as_str(), p)).collect();
        for p in &report.predictions {
            if p.correct {
                s.wrong_pool.remove(&p.example_id);
            } else {
                s.wrong_pool.insert(p.example_id.clone(), p.clone());
            }
        }

        let mut rec = StepRecord {
            step: s.log.steps.len(),
            epoch,
            cluster_id: batch.cluster_id,
            batch_index: batch.batch_index,
            batch_size: examples.len(),
            status: StepStatus::AllCorrect,
            minibatches_with_wrong: 0,
            feedbacks: 0,
            edits: Vec::new(),
            p1: report.accuracy,
            p2: None,
            q1: None,
            q2: None,
            accepted: false,
            ledger: LedgerSnapshot::default(),
        };
        let status = self.update(s, epoch, epoch_seed, batch, &examples, &predictions, report.accuracy, &mut rec)?;
        rec.status = status;
        rec.ledger = self.ledger().since(&before);
        s.log.steps.push(rec);
        Ok(status)
    }

    #[allow(clippy::too_many_arguments)]
    fn update(
        &self,
        s: &mut State,
        epoch: u32,
        epoch_seed: u64,
        batch: &Batch,
        examples: &[Example],
        predictions: &BTreeMap<&str, &Prediction>,
        p1_batch: Accuracy,
        rec: &mut StepRecord,
    ) -> Result<StepStatus, OptimizeError> {
        let cfg = &self.config;
        let mut feedbacks = Vec::new();
        for mb in &batch.minibatches {
            let wrong: Vec<(&Example, &Prediction)> = mb
                .iter()
                .filter(|id| !predictions[id.as_str()].correct)
                .map(|id| Ok((self.example(id)?, predictions[id.as_str()])))
                .collect::<Result<_, OptimizeError>>()?;
            if wrong.is_empty() {
                continue;
            }
            rec.minibatches_with_wrong += 1;
            let outcome = minibatch_feedback(
                &cfg.task_description,
                &s.p1,
                batch.cluster_id,
                &wrong,
                &s.history,
                self.expert,
                &cfg.templates,
            )
            .map_err(abort(epoch))?;
            match outcome {
                Outcome::Ready(f) => feedbacks.push(f),
                Outcome::Skipped { reason, .. } => {
                    log::warn!("epoch {epoch}, cluster {}: mini-batch feedback skipped: {reason}", batch.cluster_id);
                }
            }
        }
        rec.feedbacks = feedbacks.len();
        if rec.minibatches_with_wrong == 0 {
            return Ok(StepStatus::AllCorrect);
        }
        if feedbacks.is_empty() {
            return Ok(StepStatus::NoFeedback);
        }

        let holdout = self.holdout(s, batch, epoch_seed)?;
        let holdout_refs: Vec<(&Example, &Prediction)> = holdout.iter().map(|(e, p)| (e, p)).collect();
        let batch_id = format!("e{epoch}-c{}-b{}", batch.cluster_id, batch.batch_index);
        let edit = match combine(
            &cfg.task_description,
            &s.p1,
            &batch_id,
            &feedbacks,
            &holdout_refs,
            self.expert,
            &cfg.templates,
        )
        .map_err(abort(epoch))?
        {
            Outcome::Ready(edit) => edit,
            Outcome::Skipped { reason, .. } => {
                let w = format!("{batch_id}: combine skipped: {reason}");
                log::warn!("{w}");
                s.log.warnings.push(w);
                return Ok(StepStatus::NoEdit);
            }
        };
        rec.edits = edit.edits.iter().map(|e| e.summary()).collect();

        let q1 = s.p1.apply_edits(&edit.edits).ok();
        let q2 = s.p2.apply_edits(&edit.edits).ok();
        if q1.is_none() && q2.is_none() {
            let w = format!("{batch_id}: edits do not apply to either beam prompt");
            log::warn!("{w}");
            s.log.warnings.push(w);
            return Ok(StepStatus::ApplyFailed);
        }

        let on_validation = cfg.mode == Mode::Greedy && cfg.greedy_on_validation;
        let (acceptance, kind) = if on_validation {
            (&self.validation.examples[..], self.validation.answer_kind)
        } else {
            (examples, self.train.answer_kind)
        };
        let mut memo: Vec<Scored> = Vec::new();
        if !on_validation {
            memo.push(Scored::new(s.p1.clone(), p1_batch));
        }
        let mut scored = |p: &SectionedPrompt| -> Result<Scored, OptimizeError> {
            if let Some(hit) = memo.iter().find(|m| m.prompt == *p) {
                return Ok(hit.clone());
            }
            let acc = score(p, acceptance, kind, self.solver).map_err(eval_abort(epoch))?;
            memo.push(Scored::new(p.clone(), acc));
            Ok(Scored::new(p.clone(), acc))
        };

        let p1 = scored(&s.p1)?;
        let q1s = q1.as_ref().map(&mut scored).transpose()?;
        let (new_p1, new_p2) = match cfg.mode {
            Mode::Beam => {
                let q2s = q2.as_ref().map(&mut scored).transpose()?;
                let p2s = if s.p1 != s.p0 {
                    let p2s = scored(&s.p2)?;
                    rec.p2 = Some(p2s.accuracy);
                    p2s
                } else {
                    Scored::new(s.p2.clone(), Accuracy::zero())
                };
                rec.q2 = q2s.as_ref().map(|q| q.accuracy);
                let (a, b) = beam_choose(&s.p0, &p1, &p2s, q1s.as_ref(), q2s.as_ref());
                (a.prompt, b.prompt)
            }
            Mode::Greedy => (greedy_choose(&p1, q1s.as_ref()).prompt, s.p2.clone()),
        };
        rec.p1 = p1.accuracy;
        rec.q1 = q1s.as_ref().map(|q| q.accuracy);

        if let Some(after) = rec.q1.or(rec.q2) {
            let entry = s.history.record(&edit.summary(), p1.accuracy.ratio(), after.ratio());
            s.log.history.push(HistoryRecord { step: rec.step, epoch, entry });
        }
        rec.accepted = new_p1 != s.p1;
        s.p1 = new_p1;
        s.p2 = new_p2;
        Ok(StepStatus::Processed)
    }
}

/// Runs a fresh optimization.
pub fn optimize(
    config: OptimizerConfig,
    train: &Dataset,
    validation: &Dataset,
    solver: &Llm,
    expert: &Llm,
) -> Result<RunOutcome, OptimizeError> {
    Optimizer::new(config, train, validation, solver, expert).run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split;
    use crate::data::SplitSpec;
    use crate::gateway::{CallLedger, Limiter, Purpose, ScriptedBackend};
    use crate::prompt::Section;
    use crate::synth::{generate, oracle_accuracy, scripted_expert_for, FacetedTaskSpec, KeywordOracle};

    fn acc(c: u64, t: u64) -> Accuracy {
        Accuracy::new(c, t)
    }

    fn prompt(tag: &str) -> SectionedPrompt {
        SectionedPrompt::new(vec![Section::new("Introduction", tag).unwrap()]).unwrap()
    }

    fn s(tag: &str, a: Accuracy) -> Scored {
        Scored::new(prompt(tag), a)
    }

    #[test]
    fn beam_argmax_and_ties() {
        let p0 = prompt("p0");
        let (p1, p2) = (s("p1", acc(3, 7)), s("p2", acc(2, 7)));
        let (a, b) = beam_choose(&p0, &p1, &p2, Some(&s("q1", acc(5, 7))), Some(&s("q2", acc(4, 7))));
        assert_eq!(a.prompt, prompt("q1"));
        assert_eq!(b.prompt, prompt("q2"));

        let eq = acc(4, 7);
        let (a, b) = beam_choose(&p0, &s("p1", eq), &s("p2", eq), Some(&s("q1", eq)), Some(&s("q2", eq)));
        assert_eq!(a.prompt, prompt("p1"));
        assert_eq!(b.prompt, prompt("p2"));
    }

    #[test]
    fn beam_first_update_leaves_p2() {
        let p0 = prompt("p0");
        let (a, b) = beam_choose(
            &p0,
            &s("p0", acc(1, 7)),
            &s("p0", acc(1, 7)),
            Some(&s("q1", acc(6, 7))),
            Some(&s("q1", acc(6, 7))),
        );
        assert_eq!(a.prompt, prompt("q1"));
        assert_eq!(b.prompt, p0);
    }

    #[test]
    fn greedy_is_strict() {
        let p1 = s("p1", acc(3, 7));
        assert_eq!(greedy_choose(&p1, Some(&s("q1", acc(3, 7)))).prompt, prompt("p1"));
        assert_eq!(greedy_choose(&p1, Some(&s("q1", acc(4, 7)))).prompt, prompt("q1"));
        assert_eq!(greedy_choose(&p1, None).prompt, prompt("p1"));
    }

    fn tenths(v: &[i64]) -> Vec<Accuracy> {
        v.iter().map(|x| acc(*x as u64, 10)).collect()
    }

    #[test]
    fn early_stop_examples() {
        assert!(early_stop(&tenths(&[7, 8, 8]).into_iter().chain([acc(79, 100), acc(78, 100)]).collect::<Vec<_>>(), 3));
        assert!(!early_stop(&tenths(&[7, 8]), 3));
        assert!(!early_stop(&tenths(&[1, 2, 3, 4, 5, 6]), 1));
    }

    #[test]
    fn recluster_schedule() {
        assert_eq!((1..=9).filter(|e| should_recluster(*e, 3)).collect::<Vec<_>>(), vec![3, 6, 9]);
        assert!((1..=9).all(|e| !should_recluster(e, 0)));
        assert!((1..=9).all(|e| should_recluster(e, 1)));
    }

    #[test]
    fn config_validation() {
        let mut c = OptimizerConfig { task_description: "t".into(), ..Default::default() };
        assert!(c.validate().is_ok());
        c.minibatch_size = 8;
        assert!(c.validate().unwrap_err().contains("minibatch_size"));
    }

    struct Fixture {
        spec: FacetedTaskSpec,
        train: Dataset,
        validation: Dataset,
        solver: Llm,
        expert: Llm,
        ledger: Arc<CallLedger>,
    }

    fn fixture(per_facet: usize) -> Fixture {
        let spec = FacetedTaskSpec::new(5, per_facet, 11).unwrap();
        let train = generate(&spec).unwrap();
        let val_spec = FacetedTaskSpec { seed: 12, examples_per_facet: per_facet / 2, ..spec.clone() };
        let validation = generate(&val_spec).unwrap();
        let ledger = Arc::new(CallLedger::new());
        let limiter = Arc::new(Limiter::new(4));
        let solver = Llm::new(Arc::new(KeywordOracle::new(spec.clone())), "solver", ledger.clone(), limiter.clone());
        let expert = Llm::new(
            Arc::new(ScriptedBackend::new(scripted_expert_for(&spec)).unwrap()),
            "expert",
            ledger.clone(),
            limiter,
        );
        Fixture { spec, train, validation, solver, expert, ledger }
    }

    fn config(spec: &FacetedTaskSpec) -> OptimizerConfig {
        OptimizerConfig { task_description: spec.task_description(), max_epochs: 5, seed: 3, ..Default::default() }
    }

    #[test]
    fn scripted_run_recovers_all_facets() {
        let f = fixture(20);
        let out = optimize(config(&f.spec), &f.train, &f.validation, &f.solver, &f.expert).unwrap();
        let rendered = out.best_prompt.render();
        for kw in f.spec.keywords() {
            assert!(rendered.contains(kw), "missing {kw}");
        }
        assert!(out.best_validation.unwrap().is_perfect());
        assert_eq!(oracle_accuracy(&out.best_prompt, &f.validation, &f.spec), out.best_validation.unwrap());
        assert_eq!(out.best_validation, out.val_history.iter().max().copied());
        let epoch_total: u64 = out.log.epochs.iter().map(|e| e.ledger.total()).sum();
        assert_eq!(epoch_total, f.ledger.snapshot().total());
        for step in &out.log.steps {
            if step.status == StepStatus::Processed {
                assert_eq!(step.ledger.get(Purpose::ExpertFeedback), step.minibatches_with_wrong as u64);
                assert_eq!(step.ledger.get(Purpose::ExpertCombine), 1);
            }
            if step.accepted {
                assert!(step.q1.max(step.q2).unwrap() > step.p1);
            }
        }
    }

    #[test]
    fn zero_epochs_returns_p0() {
        let f = fixture(4);
        let cfg = OptimizerConfig { max_epochs: 0, ..config(&f.spec) };
        let out = optimize(cfg, &f.train, &f.validation, &f.solver, &f.expert).unwrap();
        assert_eq!(out.best_prompt, SectionedPrompt::from_description(&f.spec.task_description()).unwrap());
        assert!(out.val_history.is_empty());
        assert_eq!(f.ledger.snapshot().total(), 0);
    }

    #[test]
    fn ablation_flags_are_logged() {
        let f = fixture(8);
        let cfg = OptimizerConfig { clustering: ClusterMode::None, history_capacity: 0, ..config(&f.spec) };
        let out = optimize(cfg, &f.train, &f.validation, &f.solver, &f.expert).unwrap();
        assert!(out.log.clustering_disabled && out.log.history_disabled);
        assert_eq!(out.log.initial_clusters, 1);
        assert!(out.checkpoint.history.is_empty());
    }

    #[test]
    fn greedy_accepts_only_improvements() {
        let f = fixture(8);
        let cfg = OptimizerConfig { mode: Mode::Greedy, ..config(&f.spec) };
        let out = optimize(cfg, &f.train, &f.validation, &f.solver, &f.expert).unwrap();
        for step in out.log.steps.iter().filter(|s| s.status == StepStatus::Processed) {
            assert_eq!(step.accepted, step.q1.unwrap() > step.p1);
        }
        assert!(out.log.accepted_edits() > 0);
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let a = fixture(8);
        let first = optimize(config(&a.spec), &a.train, &a.validation, &a.solver, &a.expert).unwrap();
        let b = fixture(8);
        let second = optimize(config(&b.spec), &b.train, &b.validation, &b.solver, &b.expert).unwrap();
        assert_eq!(first.log, second.log);
        assert_eq!(first.checkpoint, second.checkpoint);

        let c = fixture(8);
        let mut saved = Vec::new();
        Optimizer::new(config(&c.spec), &c.train, &c.validation, &c.solver, &c.expert)
            .on_checkpoint(|ck| {
                saved.push(ck.clone());
                Ok(())
            })
            .run()
            .unwrap();
        let after_clustering = saved[0].clone();
        assert_eq!(after_clustering.epoch, 0);
        let d = fixture(8);
        let resumed = Optimizer::new(config(&d.spec), &d.train, &d.validation, &d.solver, &d.expert)
            .resume(after_clustering)
            .run()
            .unwrap();
        assert_eq!(resumed.log, first.log);
        assert_eq!(resumed.best_prompt, first.best_prompt);
        assert_eq!(resumed.checkpoint, first.checkpoint);
    }

    #[test]
    fn split_helper_is_usable_for_runs() {
        let f = fixture(10);
        let s = split(&f.train, &SplitSpec { train_size: 30, validation_size: 10, test_size: 10, seed: 1 }).unwrap();
        let out = optimize(config(&f.spec), &s.train, &s.validation, &f.solver, &f.expert).unwrap();
        assert!(!out.val_history.is_empty());
    }
}
