//! Dataset profiles and ingestion, augmented-dataset files, metrics, label
//! distributions and the human-annotation model.

mod annotation;
mod metrics;

pub use annotation::*;
pub use metrics::*;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{InputRecord, VotedLabel};
use crate::prompts::PromptProfile;
use crate::selection::SelectedPair;

pub const AUGMENTED_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{path}: header is missing column(s) {missing:?} required by the field map")]
    HeaderMismatch { path: PathBuf, missing: Vec<String> },
    #[error("{path}: duplicate id `{id}` at line {line}")]
    DuplicateId { path: PathBuf, id: String, line: usize },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("invalid label set: {0}")]
    LabelSet(String),
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("gold set is empty")]
    EmptyGolds,
    #[error("{unmatched} of {total} prediction ids ({pct:.1}%) have no gold label")]
    IdMismatch { unmatched: usize, total: usize, pct: f64 },
    #[error("annotation store at {path} is corrupt: {message}. {hint}")]
    CorruptStore { path: PathBuf, message: String, hint: String },
    #[error("invalid annotation: {0}")]
    Validation(#[from] ValidationError),
}

/// Ordered, distinct, lowercase emotion labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet(Vec<String>);

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(|l| l.into().trim().to_lowercase()).collect();
        if labels.is_empty() {
            return Err(CorpusError::LabelSet("label set is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for l in &labels {
            if l.is_empty() {
                return Err(CorpusError::LabelSet("empty label".into()));
            }
            if !seen.insert(l) {
                return Err(CorpusError::LabelSet(format!("duplicate label `{l}`")));
            }
        }
        Ok(Self(labels))
    }

    pub fn isear() -> Self {
        Self::new(["anger", "disgust", "fear", "joy", "sadness", "shame", "guilt"]).expect("valid")
    }

    pub fn emotweets() -> Self {
        Self::new(["anger", "disgust", "fear", "happy", "sadness", "surprise"]).expect("valid")
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.iter().any(|l| l == label)
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.0.iter().position(|l| l == label)
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = CorpusError;
    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(l: LabelSet) -> Self {
        l.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    #[default]
    Canonical,
    Csv,
    Tsv,
}

impl InputFormat {
    /// Guesses the format from a file extension, defaulting to canonical.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("csv") => Self::Csv,
            Some("tsv") | Some("tab") => Self::Tsv,
            _ => Self::Canonical,
        }
    }
}

/// Source column names for each record field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMap {
    pub id: String,
    pub text: String,
    pub gold_label: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self { id: "id".into(), text: "text".into(), gold_label: "gold_label".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub labels: LabelSet,
    #[serde(default)]
    pub input_format: InputFormat,
    #[serde(default)]
    pub field_map: FieldMap,
    /// Free-text label variants mapped onto the label set (baselines only).
    #[serde(default)]
    pub label_aliases: BTreeMap<String, String>,
    pub prompts: PromptProfile,
}

const ISEAR_PROFILE: &str = include_str!("../../profiles/isear.toml");
const EMOTWEETS_PROFILE: &str = include_str!("../../profiles/emotweets.toml");

impl DatasetProfile {
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let p: Self = toml::from_str(text).map_err(|e| CorpusError::Profile(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn from_file(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CorpusError::Read { path: path.to_owned(), source })?;
        Self::parse(&text)
    }

    pub fn isear() -> Self {
        Self::parse(ISEAR_PROFILE).expect("shipped profile is valid")
    }

    pub fn emotweets() -> Self {
        Self::parse(EMOTWEETS_PROFILE).expect("shipped profile is valid")
    }

    /// A shipped profile by name, or a profile file path.
    pub fn resolve(name_or_path: &str) -> Result<Self, CorpusError> {
        match name_or_path {
            "isear" => Ok(Self::isear()),
            "emotweets" | "emo" => Ok(Self::emotweets()),
            other if Path::new(other).exists() => Self::from_file(Path::new(other)),
            other => Err(CorpusError::Profile(format!(
                "unknown profile `{other}` (expected isear, emotweets or a profile file path)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        self.prompts.validate().map_err(|e| CorpusError::Profile(e.to_string()))?;
        let f = &self.field_map;
        if [&f.id, &f.text, &f.gold_label].iter().any(|c| c.trim().is_empty()) {
            return Err(CorpusError::Profile("field_map must name id, text and gold_label columns".into()));
        }
        if let Some((alias, target)) = self.label_aliases.iter().find(|(_, t)| !self.labels.contains(t)) {
            return Err(CorpusError::Profile(format!("alias `{alias}` targets unknown label `{target}`")));
        }
        Ok(())
    }
}

/// A row that could not become an InputRecord.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub line: usize,
    pub id: Option<String>,
    pub reason: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LoadedDataset {
    pub records: Vec<InputRecord>,
    pub rejected: Vec<RejectedRow>,
}

struct RawRow {
    line: usize,
    id: Option<String>,
    text: Option<String>,
    gold: Option<String>,
    raw: String,
}

fn json_field(v: &serde_json::Value, key: &str) -> Option<String> {
    match v.get(key)? {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

fn read_canonical(path: &Path, text: &str, map: &FieldMap) -> Result<Vec<RawRow>, CorpusError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(RawRow {
            line: i + 1,
            id: json_field(&v, &map.id),
            text: json_field(&v, &map.text),
            gold: json_field(&v, &map.gold_label),
            raw: line.to_owned(),
        });
    }
    Ok(rows)
}

fn read_delimited(path: &Path, text: &str, map: &FieldMap, delimiter: u8) -> Result<Vec<RawRow>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new().delimiter(delimiter).flexible(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Parse { path: path.to_owned(), line: 1, message: e.to_string() })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let missing: Vec<String> =
        [&map.id, &map.text].into_iter().filter(|c| col(c).is_none()).cloned().collect();
    if !missing.is_empty() {
        return Err(CorpusError::HeaderMismatch { path: path.to_owned(), missing });
    }
    let (id_col, text_col, gold_col) = (col(&map.id).unwrap(), col(&map.text).unwrap(), col(&map.gold_label));
    let mut rows = Vec::new();
    for result in reader.records() {
        let rec = result.map_err(|e| CorpusError::Parse {
            path: path.to_owned(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let get = |c: usize| rec.get(c).map(str::to_owned);
        rows.push(RawRow {
            line,
            id: get(id_col),
            text: get(text_col),
            gold: gold_col.and_then(get),
            raw: rec.iter().collect::<Vec<_>>().join(&(delimiter as char).to_string()),
        });
    }
    Ok(rows)
}

/// Reads a dataset in the given format. Rows with a missing id or text, or a
/// gold label outside the profile's label set, are returned as rejections.
pub fn load_dataset(path: &Path, profile: &DatasetProfile, format: InputFormat) -> Result<LoadedDataset, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Read { path: path.to_owned(), source })?;
    let rows = match format {
        InputFormat::Canonical => read_canonical(path, &text, &profile.field_map)?,
        InputFormat::Csv => read_delimited(path, &text, &profile.field_map, b',')?,
        InputFormat::Tsv => read_delimited(path, &text, &profile.field_map, b'\t')?,
    };

    let mut out = LoadedDataset::default();
    let mut seen = BTreeSet::new();
    for row in rows {
        let reject = |reason: String| RejectedRow { line: row.line, id: row.id.clone(), reason, raw: row.raw.clone() };
        let id = match row.id.as_deref().map(str::trim) {
            Some(id) if !id.is_empty() => id.to_owned(),
            _ => {
                out.rejected.push(reject("missing id".into()));
                continue;
            }
        };
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { path: path.to_owned(), id, line: row.line });
        }
        let text = match row.text.as_deref() {
            Some(t) if !t.trim().is_empty() => t.to_owned(),
            _ => {
                out.rejected.push(reject("empty text".into()));
                continue;
            }
        };
        let gold_label = match row.gold.as_deref().map(|g| g.trim().to_lowercase()) {
            Some(g) if g.is_empty() => None,
            Some(g) if !profile.labels.contains(&g) => {
                out.rejected.push(reject(format!("gold label `{g}` is not in the {} label set", profile.name)));
                continue;
            }
            other => other,
        };
        out.records.push(InputRecord { id, text, gold_label });
    }
    Ok(out)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let werr = |source| CorpusError::Write { path: path.to_owned(), source };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_owned(),
        _ => PathBuf::from("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(werr)?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(werr)?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        werr(e)
    })
}

/// Serializes items as one JSON object per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("serializable");
        out.push(b'\n');
    }
    out
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Read { path: path.to_owned(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CorpusError::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_rejected(rejected: &[RejectedRow], path: &Path) -> Result<(), CorpusError> {
    atomic_write(path, &to_jsonl(rejected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    pub schema_version: u32,
    pub id: String,
    pub text: String,
    pub gold_label: Option<String>,
    pub voted_label: VotedLabel,
    pub top: Vec<SelectedPair>,
    pub emotion_words: BTreeSet<String>,
    pub contexts: Vec<String>,
    pub run_id: String,
}

impl AugmentedRecord {
    pub fn new(
        record: &InputRecord,
        voted_label: VotedLabel,
        top: Vec<SelectedPair>,
        emotion_words: BTreeSet<String>,
        contexts: Vec<String>,
        run_id: &str,
    ) -> Self {
        Self {
            schema_version: AUGMENTED_SCHEMA_VERSION,
            id: record.id.clone(),
            text: record.text.clone(),
            gold_label: record.gold_label.clone(),
            voted_label,
            top,
            emotion_words,
            contexts,
            run_id: run_id.to_owned(),
        }
    }

    /// Context shown alongside the explanation at `rank` (1-based).
    pub fn context_for_rank(&self, rank: usize) -> &str {
        self.top
            .get(rank.wrapping_sub(1))
            .and_then(|p| p.context_index)
            .and_then(|i| self.contexts.get(i))
            .map_or("", String::as_str)
    }
}

pub fn write_augmented(records: &[AugmentedRecord], path: &Path) -> Result<(), CorpusError> {
    atomic_write(path, &to_jsonl(records))
}

pub fn read_augmented(path: &Path) -> Result<Vec<AugmentedRecord>, CorpusError> {
    let records: Vec<AugmentedRecord> = read_jsonl(path)?;
    if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.schema_version != AUGMENTED_SCHEMA_VERSION) {
        return Err(CorpusError::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: format!("unsupported schema_version {} (expected {AUGMENTED_SCHEMA_VERSION})", r.schema_version),
        });
    }
    Ok(records)
}

/// Exact multiset counts.
pub fn label_distribution<S: AsRef<str>>(labels: &[S]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_ref().to_owned()).or_insert(0) += 1;
    }
    counts
}

/// Counts ordered by count descending, then label.
pub fn distribution_rows(counts: &BTreeMap<String, usize>) -> Vec<(String, usize)> {
    let mut rows: Vec<(String, usize)> = counts.iter().map(|(l, c)| (l.clone(), *c)).collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    rows
}

/// Two-column `label<TAB>count` table with a header row.
pub fn distribution_tsv(counts: &BTreeMap<String, usize>) -> String {
    let mut out = String::from("label\tcount\n");
    for (l, c) in distribution_rows(counts) {
        out.push_str(&format!("{l}\t{c}\n"));
    }
    out
}
