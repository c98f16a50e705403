//! Answer selection over generated reasoning samples.
//!
//! Outputs are parsed into (explanation, label), grouped by normalized label,
//! and groups whose members are semantically close are merged. Groups are
//! ranked by support (soft majority) and each emitted group is represented
//! by its medoid explanation.

mod bertscore;
mod lexicon;
mod parse;

use std::collections::{BTreeMap, BTreeSet};
use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, EmbeddingProvider, TokenEmbeddings};

pub use bertscore::{bertscore, ScoreTriple};
pub use lexicon::{extract_emotion_words, EmotionLexicon};
pub use parse::{normalize_label, parse_output, parse_text, Malformed, ParsedReasoning, ReasoningSource};

/// Similarity values closer than this are treated as ties.
pub const TIE_EPSILON: f64 = 1e-12;
pub const DEFAULT_TOP_K: usize = 3;
pub const DEFAULT_GROUP_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("embedding set is empty")]
    EmptyEmbedding,
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("embedding item {index} failed: {source}")]
    Embedding { index: usize, source: BackendError },
    #[error("nothing to select: every output was malformed or empty")]
    EmptySelection,
    #[error("similarity matrix has size {matrix} but there are {items} items")]
    SizeMismatch { matrix: usize, items: usize },
    #[error("invalid selection parameters: {0}")]
    InvalidParams(String),
    #[error("lexicon: {0}")]
    Lexicon(String),
}

/// Symmetric pairwise similarity with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    size: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds a matrix from the upper triangle; the lower is mirrored, the
    /// diagonal set to 1 and everything clamped to [-1, 1].
    pub fn from_fn(size: usize, mut pair: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; size * size];
        for i in 0..size {
            values[i * size + i] = 1.0;
            for j in i + 1..size {
                let v = pair(i, j).clamp(-1.0, 1.0);
                values[i * size + j] = v;
                values[j * size + i] = v;
            }
        }
        Self { size, values }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }
}

/// BERTScore F1 between every pair of items' similarity texts. Each distinct
/// text is embedded once and each distinct pair of texts scored once.
pub fn similarity_matrix(
    parsed: &[ParsedReasoning],
    provider: &dyn EmbeddingProvider,
) -> Result<SimilarityMatrix, SelectionError> {
    if parsed.is_empty() {
        return Err(SelectionError::EmptySelection);
    }
    let mut slot: BTreeMap<&str, usize> = BTreeMap::new();
    let mut distinct: Vec<TokenEmbeddings> = Vec::new();
    let mut text_of = Vec::with_capacity(parsed.len());
    for (index, p) in parsed.iter().enumerate() {
        let text = p.similarity_text();
        let t = match slot.get(text) {
            Some(&t) => t,
            None => {
                let e = provider.embed_tokens(text).map_err(|source| SelectionError::Embedding { index, source })?;
                distinct.push(e);
                slot.insert(text, distinct.len() - 1);
                distinct.len() - 1
            }
        };
        text_of.push(t);
    }
    let d = distinct.len();
    let mut memo: Vec<Option<f64>> = vec![None; d * d];
    let mut err = None;
    let m = SimilarityMatrix::from_fn(parsed.len(), |i, j| {
        let (a, b) = (text_of[i], text_of[j]);
        if let Some(v) = memo[a * d + b] {
            return v;
        }
        let v = match bertscore(&distinct[a], &distinct[b]) {
            Ok(s) => s.f1,
            Err(e) => {
                err.get_or_insert(e);
                0.0
            }
        };
        memo[a * d + b] = Some(v);
        memo[b * d + a] = Some(v);
        v
    });
    match err {
        Some(e) => Err(e),
        None => Ok(m),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelGroup {
    pub label: String,
    /// Indices into the parsed list, ascending.
    pub member_indices: Vec<usize>,
    pub support: usize,
    pub mean_similarity: f64,
    pub medoid_index: Option<usize>,
    /// Labels of the exact-label groups merged into this one.
    pub merged_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedPair {
    pub label: String,
    pub explanation: String,
    pub support: usize,
    /// Context that produced the medoid explanation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub top: Vec<SelectedPair>,
    pub emotion_words: BTreeSet<String>,
    pub discarded_count: usize,
    /// Every ranked group, including those beyond k.
    pub groups: Vec<LabelGroup>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionParams {
    pub k: usize,
    pub group_threshold: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self { k: DEFAULT_TOP_K, group_threshold: DEFAULT_GROUP_THRESHOLD }
    }
}

impl SelectionParams {
    pub fn validate(&self) -> Result<(), SelectionError> {
        if self.k == 0 {
            return Err(SelectionError::InvalidParams("k must be >= 1".into()));
        }
        if !(self.group_threshold > 0.0 && self.group_threshold <= 1.0) {
            return Err(SelectionError::InvalidParams(format!(
                "group threshold must be in (0, 1], got {}",
                self.group_threshold
            )));
        }
        Ok(())
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn mean_cross(sim: &SimilarityMatrix, a: &[usize], b: &[usize]) -> f64 {
    let total: f64 = a.iter().flat_map(|&i| b.iter().map(move |&j| sim.get(i, j))).sum();
    total / (a.len() * b.len()) as f64
}

fn mean_intra(sim: &SimilarityMatrix, members: &[usize]) -> f64 {
    if members.len() < 2 {
        return 1.0;
    }
    let mut total = 0.0;
    for &i in members {
        for &j in members {
            if i != j {
                total += sim.get(i, j);
            }
        }
    }
    total / (members.len() * (members.len() - 1)) as f64
}

fn cmp_f64_desc(a: f64, b: f64) -> Ordering {
    if (a - b).abs() <= TIE_EPSILON {
        Ordering::Equal
    } else {
        b.partial_cmp(&a).unwrap_or(Ordering::Equal)
    }
}

/// Complete member with the largest summed similarity to the rest of the
/// group; ties go to the lower index.
fn medoid(parsed: &[ParsedReasoning], sim: &SimilarityMatrix, members: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &i in members.iter().filter(|&&i| parsed[i].complete) {
        let score: f64 = members.iter().filter(|&&j| j != i).map(|&j| sim.get(i, j)).sum();
        match best {
            Some((_, s)) if score <= s + TIE_EPSILON => {}
            _ => best = Some((i, score)),
        }
    }
    best.map(|(i, _)| i)
}

/// Soft-majority selection of the top `k` label groups.
///
/// Items are grouped by normalized label. Two exact-label groups are linked
/// when their mean cross similarity is at least the threshold, and linked
/// groups (transitively) merge under the label of the member group with the
/// largest support, ties going to the lexicographically smaller label.
/// Groups rank by support, then mean intra-group similarity, then label.
pub fn select_top_k(
    parsed: &[ParsedReasoning],
    sim: &SimilarityMatrix,
    params: SelectionParams,
) -> Result<SelectionResult, SelectionError> {
    params.validate()?;
    if parsed.is_empty() {
        return Err(SelectionError::EmptySelection);
    }
    if sim.size() != parsed.len() {
        return Err(SelectionError::SizeMismatch { matrix: sim.size(), items: parsed.len() });
    }

    let mut exact: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in parsed.iter().enumerate() {
        exact.entry(p.label_norm.as_str()).or_default().push(i);
    }
    let exact: Vec<(&str, Vec<usize>)> = exact.into_iter().collect();

    let mut parent: Vec<usize> = (0..exact.len()).collect();
    for a in 0..exact.len() {
        for b in a + 1..exact.len() {
            if mean_cross(sim, &exact[a].1, &exact[b].1) >= params.group_threshold - TIE_EPSILON {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[rb] = ra;
            }
        }
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for g in 0..exact.len() {
        let root = find(&mut parent, g);
        components.entry(root).or_default().push(g);
    }

    let mut groups: Vec<LabelGroup> = components
        .into_values()
        .map(|parts| {
            // exact groups are in label order, so the first maximum is the
            // lexicographically smallest label among the largest
            let lead = parts
                .iter()
                .copied()
                .reduce(|best, g| if exact[g].1.len() > exact[best].1.len() { g } else { best })
                .expect("component is non-empty");
            let mut members: Vec<usize> = parts.iter().flat_map(|&g| exact[g].1.iter().copied()).collect();
            members.sort_unstable();
            LabelGroup {
                label: exact[lead].0.to_owned(),
                support: members.len(),
                mean_similarity: mean_intra(sim, &members),
                medoid_index: medoid(parsed, sim, &members),
                merged_labels: parts.iter().map(|&g| exact[g].0.to_owned()).collect(),
                member_indices: members,
            }
        })
        .collect();

    groups.sort_by(|a, b| {
        b.support
            .cmp(&a.support)
            .then_with(|| cmp_f64_desc(a.mean_similarity, b.mean_similarity))
            .then_with(|| a.label.cmp(&b.label))
    });

    let top = groups
        .iter()
        .take(params.k)
        .map(|g| {
            let rep = g.medoid_index.unwrap_or(g.member_indices[0]);
            SelectedPair {
                label: g.label.clone(),
                explanation: g.medoid_index.map(|m| parsed[m].explanation.clone()).unwrap_or_default(),
                support: g.support,
                context_index: Some(parsed[rep].source.context_index),
            }
        })
        .collect();

    Ok(SelectionResult { top, emotion_words: BTreeSet::new(), discarded_count: 0, groups })
}

/// Parse outcomes in, selection with emotion words out.
pub fn select(
    outcomes: &[Result<ParsedReasoning, Malformed>],
    provider: &dyn EmbeddingProvider,
    params: SelectionParams,
    lexicon: &EmotionLexicon,
) -> Result<SelectionResult, SelectionError> {
    let parsed: Vec<ParsedReasoning> = outcomes.iter().filter_map(|o| o.as_ref().ok().cloned()).collect();
    let discarded = outcomes.len() - parsed.len();
    if parsed.is_empty() {
        return Err(SelectionError::EmptySelection);
    }
    let sim = similarity_matrix(&parsed, provider)?;
    let mut result = select_top_k(&parsed, &sim, params)?;
    result.discarded_count = discarded;
    let texts: Vec<&str> =
        result.top.iter().flat_map(|p| [p.label.as_str(), p.explanation.as_str()]).collect();
    result.emotion_words = extract_emotion_words(&texts, lexicon);
    Ok(result)
}
