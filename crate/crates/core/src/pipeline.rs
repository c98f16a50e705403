//! The two-step method for one record: generate contexts, classify per
//! context over the fixed label set and vote, then sample open-ended
//! reasoning per context and hand it to selection.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, EmbeddingProvider, SamplingParams};
use crate::corpus::{AugmentedRecord, LabelSet};
use crate::prompts::{PromptError, PromptKind, PromptProfile, FewShotTemplate};
use crate::selection::{
    self, normalize_label, parse_output, EmotionLexicon, LabelGroup, Malformed, ParsedReasoning,
    SelectionError, SelectionParams,
};

pub const DEFAULT_CONTEXTS: u32 = 10;
pub const DEFAULT_REASONING_SAMPLES: u32 = 10;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("selection: {0}")]
    Selection(#[from] SelectionError),
    #[error("no votes: every context failed classification")]
    NoVotes,
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub gold_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSet {
    pub record_id: String,
    pub contexts: Vec<String>,
    /// Set when every generated context is empty.
    #[serde(default)]
    pub degenerate: bool,
}

impl ContextSet {
    pub fn n(&self) -> usize {
        self.contexts.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPrediction {
    pub context_index: usize,
    pub label: String,
    pub score: f64,
    pub score_table: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VotedLabel {
    pub label: String,
    pub vote_count: usize,
    pub total_votes: usize,
    pub tie_broken: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawReasoning {
    pub record_id: String,
    pub context_index: usize,
    pub sample_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedContext {
    pub context_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub predictions: Vec<ContextPrediction>,
    pub skipped: Vec<SkippedContext>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reasonings {
    pub items: Vec<RawReasoning>,
    pub skipped: Vec<SkippedContext>,
}

/// Samples `params.num_samples` contexts from the few-shot prompt. Contexts
/// are trimmed; empty ones are kept so indices stay aligned.
pub fn generate_contexts(
    backend: &dyn Backend,
    record: &InputRecord,
    template: &FewShotTemplate,
    params: &SamplingParams,
) -> Result<ContextSet, PipelineError> {
    let prompt = crate::prompts::render_context_prompt(template, &record.text)?;
    let results = backend.generate(&prompt.text, params)?;
    let contexts: Vec<String> = results.into_iter().map(|r| r.text.trim().to_owned()).collect();
    let degenerate = contexts.iter().all(String::is_empty);
    if degenerate {
        tracing::warn!(record = %record.id, "every generated context is empty");
    }
    Ok(ContextSet { record_id: record.id.clone(), contexts, degenerate })
}

/// Highest-scoring label; ties go to the label listed first in `labels`.
pub fn argmax_label<'a>(labels: &'a LabelSet, table: &BTreeMap<String, f64>) -> Option<(&'a str, f64)> {
    let mut best: Option<(&str, f64)> = None;
    for label in labels.iter() {
        let Some(&score) = table.get(label) else { continue };
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((label, score));
        }
    }
    best
}

/// Scores every label as a continuation of the emotion QA prompt for each
/// context and keeps the argmax. Contexts that are empty or fail scoring
/// are skipped.
pub fn classify_per_context(
    backend: &dyn Backend,
    record: &InputRecord,
    contexts: &ContextSet,
    labels: &LabelSet,
    prompts: &PromptProfile,
    length_normalize: bool,
) -> Result<Classification, PipelineError> {
    if contexts.contexts.is_empty() {
        return Err(PipelineError::Config("no contexts to classify".into()));
    }
    let candidates: Vec<String> = labels.iter().map(str::to_owned).collect();
    let mut predictions = Vec::new();
    let mut skipped = Vec::new();
    for (i, context) in contexts.contexts.iter().enumerate() {
        if context.is_empty() {
            skipped.push(SkippedContext { context_index: i, reason: "empty context".into() });
            continue;
        }
        let prompt = prompts.render_emotion(context, &record.text)?;
        let scores = match backend.score_continuations(&prompt.text, &candidates) {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(record = %record.id, context = i, error = %e, "context scoring failed");
                skipped.push(SkippedContext { context_index: i, reason: e.to_string() });
                continue;
            }
        };
        let score_table: BTreeMap<String, f64> = scores
            .iter()
            .map(|s| {
                let v = if length_normalize { s.mean_log_prob() } else { s.log_prob_sum };
                (s.candidate.clone(), v)
            })
            .collect();
        let (label, score) = argmax_label(labels, &score_table).expect("label set is non-empty");
        predictions.push(ContextPrediction { context_index: i, label: label.to_owned(), score, score_table });
    }
    Ok(Classification { predictions, skipped })
}

/// Majority vote over per-context predictions.
///
/// Ties on vote count go to the label with the greater mean score among its
/// supporting contexts, then to the label listed first in `labels`; labels
/// outside the set order after it, lexicographically.
pub fn vote_majority(predictions: &[ContextPrediction], labels: &LabelSet) -> Result<VotedLabel, PipelineError> {
    if predictions.is_empty() {
        return Err(PipelineError::NoVotes);
    }
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for p in predictions {
        let e = tally.entry(p.label.as_str()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += p.score;
    }
    let max_votes = tally.values().map(|(c, _)| *c).max().expect("non-empty tally");
    let tied: Vec<(&str, f64)> = tally
        .iter()
        .filter(|(_, (c, _))| *c == max_votes)
        .map(|(l, (c, sum))| (*l, sum / *c as f64))
        .collect();
    let rank = |l: &str| labels.position(l).unwrap_or(usize::MAX);
    let (label, _) = tied
        .iter()
        .copied()
        .reduce(|a, b| {
            let by_score = a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal);
            let a_wins = match by_score {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => (rank(a.0), a.0) <= (rank(b.0), b.0),
            };
            if a_wins {
                a
            } else {
                b
            }
        })
        .expect("at least one label has the maximum count");
    Ok(VotedLabel {
        label: label.to_owned(),
        vote_count: max_votes,
        total_votes: predictions.len(),
        tie_broken: tied.len() > 1,
    })
}

/// Samples `params.num_samples` reasoning completions per non-empty context.
pub fn generate_reasonings(
    backend: &dyn Backend,
    record: &InputRecord,
    contexts: &ContextSet,
    params: &SamplingParams,
    prompts: &PromptProfile,
) -> Result<Reasonings, PipelineError> {
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for (i, context) in contexts.contexts.iter().enumerate() {
        if context.is_empty() {
            skipped.push(SkippedContext { context_index: i, reason: "empty context".into() });
            continue;
        }
        let prompt = prompts.render_emotion(context, &record.text)?;
        match backend.generate(&prompt.text, params) {
            Ok(results) => items.extend(results.into_iter().map(|r| RawReasoning {
                record_id: record.id.clone(),
                context_index: i,
                sample_index: r.sample_index as usize,
                text: r.text,
            })),
            Err(e) => {
                tracing::warn!(record = %record.id, context = i, error = %e, "reasoning generation failed");
                skipped.push(SkippedContext { context_index: i, reason: e.to_string() });
            }
        }
    }
    Ok(Reasonings { items, skipped })
}

/// Maps a free-text generation onto the label set: the whole normalized
/// answer, then its alias, then a single label word found in the text.
pub fn map_to_label_set(raw: &str, labels: &LabelSet, aliases: &BTreeMap<String, String>) -> Option<String> {
    let lookup = |w: &str| -> Option<String> {
        if labels.contains(w) {
            return Some(w.to_owned());
        }
        aliases.get(w).filter(|c| labels.contains(c)).cloned()
    };
    let first_line = raw.trim().lines().next().unwrap_or_default();
    if let Some(l) = lookup(&normalize_label(first_line, None)) {
        return Some(l);
    }
    let found: std::collections::BTreeSet<String> = raw
        .split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .filter_map(|t| lookup(&t.to_lowercase()))
        .collect();
    if found.len() == 1 {
        found.into_iter().next()
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub n_contexts: u32,
    pub q_samples: u32,
    pub nucleus_p: f64,
    pub max_new_tokens: u32,
    pub seed: Option<u64>,
    pub selection: SelectionParamsConfig,
    pub length_normalize: bool,
    pub parallelism: usize,
    pub run_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParamsConfig {
    pub k: usize,
    pub group_threshold: f64,
}

impl From<SelectionParamsConfig> for SelectionParams {
    fn from(c: SelectionParamsConfig) -> Self {
        SelectionParams { k: c.k, group_threshold: c.group_threshold }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_contexts: DEFAULT_CONTEXTS,
            q_samples: DEFAULT_REASONING_SAMPLES,
            nucleus_p: crate::backend::DEFAULT_NUCLEUS_P,
            max_new_tokens: crate::backend::DEFAULT_MAX_NEW_TOKENS,
            seed: None,
            selection: SelectionParamsConfig {
                k: selection::DEFAULT_TOP_K,
                group_threshold: selection::DEFAULT_GROUP_THRESHOLD,
            },
            length_normalize: false,
            parallelism: 1,
            run_id: String::new(),
        }
    }
}

impl PipelineConfig {
    fn sampling(&self, num_samples: u32) -> SamplingParams {
        SamplingParams {
            nucleus_p: self.nucleus_p,
            max_new_tokens: self.max_new_tokens,
            num_samples,
            seed: self.seed,
            temperature: None,
        }
    }

    pub fn context_params(&self) -> SamplingParams {
        self.sampling(self.n_contexts)
    }

    pub fn reasoning_params(&self) -> SamplingParams {
        self.sampling(self.q_samples)
    }
}

/// Everything produced while processing one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordAudit {
    pub record_id: String,
    pub contexts: ContextSet,
    pub classification: Classification,
    pub voted: VotedLabel,
    pub reasonings: Reasonings,
    pub parsed: Vec<Result<ParsedReasoning, Malformed>>,
    pub groups: Vec<LabelGroup>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Contexts,
    Classify,
    Vote,
    Reasonings,
    Selection,
}

#[derive(Debug, Error)]
#[error("record {record_id} failed at {stage:?}: {source}")]
pub struct RecordFailure {
    pub record_id: String,
    pub stage: Stage,
    #[source]
    pub source: PipelineError,
}

/// Dependencies shared by every record of a run.
pub struct Pipeline<'a> {
    pub backend: &'a dyn Backend,
    pub embedder: &'a dyn EmbeddingProvider,
    pub prompts: &'a PromptProfile,
    pub labels: &'a LabelSet,
    pub lexicon: &'a EmotionLexicon,
    pub config: PipelineConfig,
}

impl Pipeline<'_> {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.config.context_params().validate()?;
        self.config.reasoning_params().validate()?;
        SelectionParams::from(self.config.selection).validate()?;
        self.prompts.validate()?;
        Ok(())
    }

    /// Contexts, per-context classification and the vote.
    pub fn classify_record(&self, record: &InputRecord) -> Result<(ContextSet, Classification, VotedLabel), RecordFailure> {
        let fail = |stage| move |source| RecordFailure { record_id: record.id.clone(), stage, source };
        let contexts = generate_contexts(self.backend, record, &self.prompts.context, &self.config.context_params())
            .map_err(fail(Stage::Contexts))?;
        let classification = classify_per_context(
            self.backend,
            record,
            &contexts,
            self.labels,
            self.prompts,
            self.config.length_normalize,
        )
        .map_err(fail(Stage::Classify))?;
        let voted = vote_majority(&classification.predictions, self.labels).map_err(fail(Stage::Vote))?;
        Ok((contexts, classification, voted))
    }

    pub fn run_record(&self, record: &InputRecord) -> Result<(AugmentedRecord, RecordAudit), RecordFailure> {
        let fail = |stage| move |source| RecordFailure { record_id: record.id.clone(), stage, source };
        let (contexts, classification, voted) = self.classify_record(record)?;
        let reasonings =
            generate_reasonings(self.backend, record, &contexts, &self.config.reasoning_params(), self.prompts)
                .map_err(fail(Stage::Reasonings))?;
        let parsed: Vec<_> = reasonings.items.iter().map(|r| parse_output(r, Some(self.lexicon))).collect();
        let selected = selection::select(&parsed, self.embedder, self.config.selection.into(), self.lexicon)
            .map_err(|e| fail(Stage::Selection)(e.into()))?;

        let augmented = AugmentedRecord::new(
            record,
            voted.clone(),
            selected.top.clone(),
            selected.emotion_words.clone(),
            contexts.contexts.clone(),
            &self.config.run_id,
        );
        let audit = RecordAudit {
            record_id: record.id.clone(),
            contexts,
            classification,
            voted,
            reasonings,
            parsed,
            groups: selected.groups,
        };
        Ok((augmented, audit))
    }

    /// Effective worker count: capped by the record count and forced to one
    /// when the backend needs single-threaded use.
    pub fn workers(&self, records: usize) -> usize {
        if !self.backend.capabilities().concurrent {
            return 1;
        }
        self.config.parallelism.max(1).min(records.max(1))
    }

    /// Applies `op` to every record on a bounded worker pool, returning
    /// results in input order.
    pub fn map_records<T: Send>(
        &self,
        records: &[InputRecord],
        op: impl Fn(&InputRecord) -> T + Sync,
    ) -> Vec<T> {
        let workers = self.workers(records.len());
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..records.len()).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, AtomicOrdering::Relaxed);
                    if i >= records.len() {
                        break;
                    }
                    let out = op(&records[i]);
                    slots.lock().expect("result slots poisoned")[i] = Some(out);
                });
            }
        });
        slots
            .into_inner()
            .expect("result slots poisoned")
            .into_iter()
            .map(|o| o.expect("every record processed"))
            .collect()
    }

    pub fn run_all(&self, records: &[InputRecord]) -> Vec<RecordRun> {
        self.map_records(records, |r| {
            let started = Instant::now();
            let result = self.run_record(r);
            RecordRun { record_id: r.id.clone(), elapsed_ms: started.elapsed().as_millis() as u64, result }
        })
    }
}

pub struct RecordRun {
    pub record_id: String,
    pub elapsed_ms: u64,
    pub result: Result<(AugmentedRecord, RecordAudit), RecordFailure>,
}

/// Greedy single-generation baseline prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselinePrediction {
    pub id: String,
    pub raw: String,
    pub label: Option<String>,
}

pub fn baseline_predict(
    backend: &dyn Backend,
    prompts: &PromptProfile,
    kind: PromptKind,
    record: &InputRecord,
    labels: &LabelSet,
    aliases: &BTreeMap<String, String>,
    max_new_tokens: u32,
) -> Result<BaselinePrediction, PipelineError> {
    let prompt = prompts.render_baseline(kind, &record.text)?;
    let out = backend.generate(&prompt.text, &SamplingParams::greedy(max_new_tokens))?;
    let raw = out.into_iter().next().map(|r| r.text).unwrap_or_default();
    Ok(BaselinePrediction { id: record.id.clone(), label: map_to_label_set(&raw, labels, aliases), raw })
}
