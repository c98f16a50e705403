use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, EmbeddingProvider, TokenEmbeddings};

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn tokenize_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Deterministic pseudo-embedding: each token is projected to a fixed vector
/// derived from a seeded hash of its text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
    #[serde(skip)]
    id: String,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim: dim.max(1), seed, id: format!("hash-{}-{seed}", dim.max(1)) }
    }

    pub fn vector(&self, token: &str) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        let mut block = 0u64;
        while out.len() < self.dim {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(block.to_le_bytes());
            h.update(token.as_bytes());
            let digest = h.finalize();
            for chunk in digest.chunks_exact(4) {
                if out.len() == self.dim {
                    break;
                }
                let n = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                out.push(f64::from(n) / f64::from(u32::MAX) * 2.0 - 1.0);
            }
            block += 1;
        }
        out
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> &str {
        if self.id.is_empty() {
            "hash"
        } else {
            &self.id
        }
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("text to embed is empty".into()));
        }
        let tokens = tokenize_words(text);
        if tokens.is_empty() {
            return Err(BackendError::EmptyAfterTokenization);
        }
        let vectors = tokens.iter().map(|t| self.vector(t)).collect();
        TokenEmbeddings::new(tokens, vectors)
    }
}

/// Fixed token→vector lookup, with an optional hash fallback for tokens the
/// table does not cover.
#[derive(Debug, Clone, Default)]
pub struct TableEmbedder {
    table: BTreeMap<String, Vec<f64>>,
    fallback: Option<HashEmbedder>,
}

impl TableEmbedder {
    pub fn new(table: BTreeMap<String, Vec<f64>>) -> Self {
        let table = table.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect();
        Self { table, fallback: None }
    }

    pub fn with_fallback(mut self, fallback: HashEmbedder) -> Self {
        self.fallback = Some(fallback);
        self
    }
}

impl EmbeddingProvider for TableEmbedder {
    fn id(&self) -> &str {
        "table"
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("text to embed is empty".into()));
        }
        let tokens = tokenize_words(text);
        if tokens.is_empty() {
            return Err(BackendError::EmptyAfterTokenization);
        }
        let mut vectors = Vec::with_capacity(tokens.len());
        for t in &tokens {
            match (self.table.get(t), &self.fallback) {
                (Some(v), _) => vectors.push(v.clone()),
                (None, Some(h)) => vectors.push(h.vector(t)),
                (None, None) => {
                    return Err(BackendError::Rejected {
                        status: 404,
                        detail: format!("no embedding for token `{t}`"),
                    })
                }
            }
        }
        TokenEmbeddings::new(tokens, vectors)
    }
}
