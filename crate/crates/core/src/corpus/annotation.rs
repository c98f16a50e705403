//! Human-evaluation records, their aggregation, the on-disk store and the
//! task queue served to annotators.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{atomic_write, AugmentedRecord, CorpusError};

pub const QUESTIONS: [&str; 5] = [
    "Does this label correctly represent the emotion expressed by the input text?",
    "Is this label more appropriate than the gold emotion label for the input text?",
    "Is the emotional reasoning correct?",
    "Is the reasoning grammatically correct?",
    "Is the reasoning complete?",
];

pub const ANSWER_LABELS: [&str; 3] = ["Yes", "Maybe", "No"];
/// Reading of "Maybe" for the second question.
pub const Q2_MAYBE_READING: &str = "New emotion label is same as gold label";

pub fn answer_labels(question: usize) -> [&'static str; 3] {
    if question == 2 {
        ["Yes", Q2_MAYBE_READING, "No"]
    } else {
        ANSWER_LABELS
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{field}: {message}")]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub label_rank: u32,
    /// Answers to the five questions: 1 Yes, 2 Maybe, 3 No.
    pub answers: Vec<u8>,
    pub annotator_id: String,
    /// Seconds since the Unix epoch; stamped by the store when zero.
    #[serde(default)]
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AnnotationKey {
    pub sample_id: String,
    pub label_rank: u32,
    pub annotator_id: String,
}

impl AnnotationRecord {
    pub fn key(&self) -> AnnotationKey {
        AnnotationKey {
            sample_id: self.sample_id.clone(),
            label_rank: self.label_rank,
            annotator_id: self.annotator_id.clone(),
        }
    }

    /// Checks every field; `max_rank` is the number of selected pairs.
    pub fn validate(&self, max_rank: u32) -> Result<(), ValidationError> {
        if self.sample_id.trim().is_empty() {
            return Err(ValidationError::new("sample_id", "must not be empty"));
        }
        if self.annotator_id.trim().is_empty() {
            return Err(ValidationError::new("annotator_id", "must not be empty"));
        }
        if self.label_rank < 1 || self.label_rank > max_rank {
            return Err(ValidationError::new("label_rank", format!("must be in [1, {max_rank}], got {}", self.label_rank)));
        }
        if self.answers.len() != QUESTIONS.len() {
            return Err(ValidationError::new("answers", format!("expected 5 answers, got {}", self.answers.len())));
        }
        if let Some((i, a)) = self.answers.iter().enumerate().find(|(_, a)| !(1..=3).contains(*a)) {
            return Err(ValidationError::new(format!("answers[{i}]"), format!("q{} answer must be 1, 2 or 3, got {a}", i + 1)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSummary {
    pub question: String,
    /// Counts of answers 1, 2, 3.
    pub counts: [usize; 3],
    pub percentages: [f64; 3],
    pub answer_labels: [String; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub total: usize,
    /// Keyed `q1`..`q5`.
    pub per_question: BTreeMap<String, QuestionSummary>,
}

pub fn aggregate_annotations(records: &[AnnotationRecord]) -> AnnotationSummary {
    let total = records.len();
    let per_question = QUESTIONS
        .iter()
        .enumerate()
        .map(|(q, text)| {
            let mut counts = [0usize; 3];
            for r in records {
                if let Some(a @ 1..=3) = r.answers.get(q).copied() {
                    counts[a as usize - 1] += 1;
                }
            }
            let pct = |c: usize| if total == 0 { 0.0 } else { (c * 100) as f64 / total as f64 };
            let summary = QuestionSummary {
                question: (*text).to_owned(),
                counts,
                percentages: counts.map(pct),
                answer_labels: answer_labels(q + 1).map(str::to_owned),
            };
            (format!("q{}", q + 1), summary)
        })
        .collect();
    AnnotationSummary { total, per_question }
}

/// One submission as recorded in the event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub record: AnnotationRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous: Option<AnnotationRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CompactedState {
    event_count: usize,
    records: Vec<AnnotationRecord>,
}

const EVENTS_FILE: &str = "events.jsonl";
const STATE_FILE: &str = "state.json";

/// Annotation store: an append-only event log plus a compacted state file.
/// Writes are serialized; re-submitting a key overwrites it and the prior
/// value stays in the log.
pub struct AnnotationStore {
    dir: PathBuf,
    inner: Mutex<StoreState>,
}

struct StoreState {
    records: BTreeMap<AnnotationKey, AnnotationRecord>,
    event_count: usize,
    dirty: bool,
}

fn corrupt(path: &Path, message: String) -> CorpusError {
    CorpusError::CorruptStore {
        path: path.to_owned(),
        message,
        hint: format!(
            "Move {} aside to rebuild from {}, or restore a backup",
            path.parent().unwrap_or(path).join(STATE_FILE).display(),
            EVENTS_FILE
        ),
    }
}

impl AnnotationStore {
    pub fn open(dir: &Path) -> Result<Self, CorpusError> {
        std::fs::create_dir_all(dir).map_err(|source| CorpusError::Write { path: dir.to_owned(), source })?;
        let state_path = dir.join(STATE_FILE);
        let events_path = dir.join(EVENTS_FILE);

        let (mut records, snapshot_count) = match std::fs::read_to_string(&state_path) {
            Ok(text) => {
                let s: CompactedState =
                    serde_json::from_str(&text).map_err(|e| corrupt(&state_path, e.to_string()))?;
                (s.records.into_iter().map(|r| (r.key(), r)).collect::<BTreeMap<_, _>>(), s.event_count)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (BTreeMap::new(), 0),
            Err(source) => return Err(CorpusError::Read { path: state_path, source }),
        };

        let events = match std::fs::read_to_string(&events_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(source) => return Err(CorpusError::Read { path: events_path, source }),
        };
        let lines: Vec<&str> = events.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() < snapshot_count {
            return Err(corrupt(
                &events_path,
                format!("state covers {snapshot_count} events but the log holds {}", lines.len()),
            ));
        }
        for (i, line) in lines.iter().enumerate().skip(snapshot_count) {
            let ev: AnnotationEvent = serde_json::from_str(line)
                .map_err(|e| corrupt(&events_path, format!("event {}: {e}", i + 1)))?;
            records.insert(ev.record.key(), ev.record);
        }
        let dirty = lines.len() > snapshot_count;
        let store = Self {
            dir: dir.to_owned(),
            inner: Mutex::new(StoreState { records, event_count: lines.len(), dirty }),
        };
        store.flush()?;
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, StoreState> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Stores `record` (already validated) and returns the value it replaced.
    pub fn submit(&self, mut record: AnnotationRecord) -> Result<Option<AnnotationRecord>, CorpusError> {
        if record.timestamp == 0 {
            record.timestamp = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
        }
        let mut state = self.lock();
        let previous = state.records.get(&record.key()).cloned();
        let event = AnnotationEvent { record: record.clone(), previous: previous.clone() };
        let path = self.dir.join(EVENTS_FILE);
        let werr = |source| CorpusError::Write { path: path.clone(), source };
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(werr)?;
        let mut line = serde_json::to_vec(&event).expect("serializable");
        line.push(b'\n');
        f.write_all(&line).and_then(|_| f.sync_data()).map_err(werr)?;
        state.records.insert(record.key(), record);
        state.event_count += 1;
        state.dirty = true;
        Self::write_state(&self.dir, &mut state)?;
        Ok(previous)
    }

    fn write_state(dir: &Path, state: &mut StoreState) -> Result<(), CorpusError> {
        if !state.dirty {
            return Ok(());
        }
        let snapshot = CompactedState { event_count: state.event_count, records: state.records.values().cloned().collect() };
        let bytes = serde_json::to_vec_pretty(&snapshot).expect("serializable");
        atomic_write(&dir.join(STATE_FILE), &bytes)?;
        state.dirty = false;
        Ok(())
    }

    /// Rewrites the compacted state if it lags the log.
    pub fn flush(&self) -> Result<(), CorpusError> {
        let mut state = self.lock();
        Self::write_state(&self.dir, &mut state)
    }

    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.lock().records.values().cloned().collect()
    }

    pub fn get(&self, key: &AnnotationKey) -> Option<AnnotationRecord> {
        self.lock().records.get(key).cloned()
    }

    /// (sample_id, label_rank) pairs already answered by `annotator`.
    pub fn answered_by(&self, annotator: &str) -> BTreeSet<(String, u32)> {
        self.lock()
            .records
            .keys()
            .filter(|k| k.annotator_id == annotator)
            .map(|k| (k.sample_id.clone(), k.label_rank))
            .collect()
    }

    pub fn summary(&self) -> AnnotationSummary {
        aggregate_annotations(&self.records())
    }

    /// Every logged submission, including overwritten ones.
    pub fn audit_log(&self) -> Result<Vec<AnnotationEvent>, CorpusError> {
        let _guard = self.lock();
        let path = self.dir.join(EVENTS_FILE);
        if !path.exists() {
            return Ok(Vec::new());
        }
        super::read_jsonl(&path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TaskOrdering {
    /// Samples shuffled with a seeded generator.
    Random { seed: u64 },
    /// Round-robin across gold labels.
    Stratified,
    Sequential,
}

impl Default for TaskOrdering {
    fn default() -> Self {
        Self::Random { seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub sample_id: String,
    pub label_rank: u32,
    pub text: String,
    pub context: String,
    pub label: String,
    pub explanation: String,
    pub gold_label: Option<String>,
    pub questions: Vec<String>,
}

/// Fixed presentation order over every (sample, rank) of a dataset.
#[derive(Debug, Clone)]
pub struct TaskQueue {
    tasks: Vec<Task>,
}

impl TaskQueue {
    pub fn new(records: &[AugmentedRecord], ordering: TaskOrdering) -> Self {
        let mut order: Vec<usize> = (0..records.len()).collect();
        match ordering {
            TaskOrdering::Sequential => {}
            TaskOrdering::Random { seed } => {
                order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            }
            TaskOrdering::Stratified => {
                let mut by_gold: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
                for (i, r) in records.iter().enumerate() {
                    by_gold.entry(r.gold_label.as_deref().unwrap_or("")).or_default().push(i);
                }
                let mut queues: Vec<std::collections::VecDeque<usize>> =
                    by_gold.into_values().map(Into::into).collect();
                order.clear();
                while queues.iter().any(|q| !q.is_empty()) {
                    for q in &mut queues {
                        if let Some(i) = q.pop_front() {
                            order.push(i);
                        }
                    }
                }
            }
        }
        let questions: Vec<String> = QUESTIONS.iter().map(|q| (*q).to_owned()).collect();
        let tasks = order
            .into_iter()
            .flat_map(|i| {
                let r = &records[i];
                let questions = questions.clone();
                r.top.iter().enumerate().map(move |(j, pair)| Task {
                    sample_id: r.id.clone(),
                    label_rank: j as u32 + 1,
                    text: r.text.clone(),
                    context: r.context_for_rank(j + 1).to_owned(),
                    label: pair.label.clone(),
                    explanation: pair.explanation.clone(),
                    gold_label: r.gold_label.clone(),
                    questions: questions.clone(),
                })
            })
            .collect();
        Self { tasks }
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    /// Largest rank of any sample, used to validate submissions.
    pub fn max_rank(&self, sample_id: &str) -> Option<u32> {
        self.tasks.iter().filter(|t| t.sample_id == sample_id).map(|t| t.label_rank).max()
    }

    /// First task `annotator` has not answered.
    pub fn next_for(&self, store: &AnnotationStore, annotator: &str) -> Option<&Task> {
        let done = store.answered_by(annotator);
        self.tasks.iter().find(|t| !done.contains(&(t.sample_id.clone(), t.label_rank)))
    }
}
