use serde::{Deserialize, Serialize};

use super::SelectionError;
use crate::backend::TokenEmbeddings;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ScoreTriple {
    /// The harmonic mean leaves [-1, 1] when exactly one side is negative,
    /// so f1 is clamped back into range.
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            (2.0 * precision * recall / (precision + recall)).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    // vectors are unit-norm by construction
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

/// Greedy-matching similarity over token embeddings.
///
/// Each reference token is matched to its most similar candidate token for
/// recall, and each candidate token to its most similar reference token for
/// precision. No importance weighting and no baseline rescaling.
pub fn bertscore(candidate: &TokenEmbeddings, reference: &TokenEmbeddings) -> Result<ScoreTriple, SelectionError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(SelectionError::EmptyEmbedding);
    }
    if candidate.dim() != reference.dim() {
        return Err(SelectionError::DimensionMismatch(candidate.dim(), reference.dim()));
    }
    let cand = candidate.vectors();
    let refs = reference.vectors();
    // sim[i][j]: reference token i vs candidate token j
    let sim: Vec<Vec<f64>> = refs.iter().map(|r| cand.iter().map(|c| cosine(r, c)).collect()).collect();

    let recall = sim
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / refs.len() as f64;
    let precision = (0..cand.len())
        .map(|j| sim.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / cand.len() as f64;
    Ok(ScoreTriple::new(precision, recall))
}
