//! Uniform access to text-generation capabilities.
//!
//! Three capabilities are modelled: sampled generation, scoring of candidate
//! continuations, and token embedding. [`ScriptedBackend`] replays fixture
//! scripts for tests and offline runs, [`RemoteBackend`] speaks the generic
//! completion protocol over HTTP, and [`CachedBackend`] puts a persistent
//! content-addressed cache in front of either.

mod cache;
mod embed;
mod remote;
mod scripted;

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{sha256_hex, CacheKey, CachedBackend, GcReport, RequestKind, ResponseCache};
pub use embed::{tokenize_words, HashEmbedder, TableEmbedder};
pub use remote::{
    CompletionChoice, CompletionRequest, CompletionResponse, EmbeddingRequest, RemoteBackend,
    RemoteConfig, TokenLogprobs,
};
pub use scripted::{HashFallback, Script, ScriptedBackend};

pub const DEFAULT_NUCLEUS_P: f64 = 0.9;
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 60;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend rejected request (status {status}): {detail}")]
    Rejected { status: u16, detail: String },
    #[error("backend `{backend}` does not support {capability}")]
    Unsupported { backend: String, capability: &'static str },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("text is empty after tokenization")]
    EmptyAfterTokenization,
    #[error("cache error: {0}")]
    Cache(String),
    #[error("malformed backend response: {0}")]
    Decode(String),
}

impl BackendError {
    /// Transient failures are worth another attempt.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Unreachable(_))
    }
}

/// Sampling parameters for a generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub nucleus_p: f64,
    pub max_new_tokens: u32,
    pub num_samples: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            nucleus_p: DEFAULT_NUCLEUS_P,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            num_samples: 1,
            seed: None,
            temperature: None,
        }
    }
}

impl SamplingParams {
    pub fn with_samples(num_samples: u32) -> Self {
        Self { num_samples, ..Self::default() }
    }

    /// Greedy decoding: a single sample at temperature zero over the full
    /// distribution.
    pub fn greedy(max_new_tokens: u32) -> Self {
        Self {
            nucleus_p: 1.0,
            max_new_tokens,
            num_samples: 1,
            seed: None,
            temperature: Some(0.0),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(BackendError::InvalidRequest(format!(
                "nucleus_p must be in (0, 1], got {}",
                self.nucleus_p
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be >= 1".into()));
        }
        if self.num_samples == 0 {
            return Err(BackendError::InvalidRequest("num_samples must be >= 1".into()));
        }
        if let Some(t) = self.temperature {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(BackendError::InvalidRequest(format!(
                    "temperature must be a non-negative finite number, got {t}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Length,
    Stop,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub sample_index: u32,
}

/// Summed log-probability of `candidate` as a continuation of a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationScore {
    pub candidate: String,
    pub log_prob_sum: f64,
    pub token_count: u32,
}

impl ContinuationScore {
    pub fn mean_log_prob(&self) -> f64 {
        self.log_prob_sum / f64::from(self.token_count.max(1))
    }
}

/// Tokens with one unit-norm vector each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddings {
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl TokenEmbeddings {
    /// Builds the embedding set, normalizing every vector to unit length.
    pub fn new(tokens: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self, BackendError> {
        if tokens.len() != vectors.len() {
            return Err(BackendError::Decode(format!(
                "{} tokens but {} vectors",
                tokens.len(),
                vectors.len()
            )));
        }
        if tokens.is_empty() {
            return Err(BackendError::EmptyAfterTokenization);
        }
        let dim = vectors[0].len();
        let mut normalized = Vec::with_capacity(vectors.len());
        for (token, v) in tokens.iter().zip(vectors) {
            if v.len() != dim || dim == 0 {
                return Err(BackendError::Decode(format!(
                    "vector for token `{token}` has dimension {} (expected {dim})",
                    v.len()
                )));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(BackendError::Decode(format!(
                    "vector for token `{token}` cannot be normalized"
                )));
            }
            normalized.push(v.into_iter().map(|x| x / norm).collect());
        }
        Ok(Self { tokens, vectors: normalized })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub generation: bool,
    pub scoring: bool,
    /// False when the implementation must only be driven from one thread
    /// for its outputs to be reproducible.
    pub concurrent: bool,
}

/// Generation and continuation scoring.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    /// Returns exactly `params.num_samples` results in sample-index order.
    fn generate(&self, prompt: &str, params: &SamplingParams)
        -> Result<Vec<GenerationResult>, BackendError>;

    /// One score per candidate, in input order.
    fn score_continuations(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<ContinuationScore>, BackendError>;

    /// Number of requests that actually reached the underlying provider.
    fn calls(&self) -> u64 {
        0
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, BackendError>;
}

impl<T: Backend + ?Sized> Backend for std::sync::Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn generate(
        &self,
        prompt: &str,
        params: &SamplingParams,
    ) -> Result<Vec<GenerationResult>, BackendError> {
        (**self).generate(prompt, params)
    }
    fn score_continuations(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<ContinuationScore>, BackendError> {
        (**self).score_continuations(prompt, candidates)
    }
    fn calls(&self) -> u64 {
        (**self).calls()
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, BackendError> {
        (**self).embed_tokens(text)
    }
}

pub(crate) fn check_prompt(prompt: &str) -> Result<(), BackendError> {
    if prompt.is_empty() {
        return Err(BackendError::InvalidRequest("prompt is empty".into()));
    }
    Ok(())
}

pub(crate) fn check_candidates(candidates: &[String]) -> Result<(), BackendError> {
    if candidates.is_empty() {
        return Err(BackendError::InvalidRequest("no candidates to score".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for c in candidates {
        let trimmed = c.trim();
        if trimmed.is_empty() {
            return Err(BackendError::InvalidRequest("empty candidate".into()));
        }
        if !seen.insert(trimmed) {
            return Err(BackendError::InvalidRequest(format!("duplicate candidate `{trimmed}`")));
        }
    }
    Ok(())
}

/// Bounded retry policy for transient failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay: Duration::from_millis(250) }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { max_attempts: 1, base_delay: Duration::ZERO }
    }

    /// Runs `op` until it succeeds, fails permanently, or attempts run out.
    /// The delay doubles after every transient failure.
    pub fn run<T>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let attempts = self.max_attempts.max(1);
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Err(e) if e.is_transient() && attempt < attempts => {
                    tracing::warn!(attempt, error = %e, "transient backend failure, retrying");
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn default_sampling_params() {
        let p = SamplingParams::default();
        assert_eq!(p.nucleus_p, 0.9);
        assert_eq!(p.max_new_tokens, 60);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn sampling_params_domain() {
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            let p = SamplingParams { nucleus_p: bad, ..SamplingParams::default() };
            assert!(p.validate().is_err(), "nucleus_p {bad} accepted");
        }
        assert!(SamplingParams { num_samples: 0, ..SamplingParams::default() }.validate().is_err());
        assert!(SamplingParams { max_new_tokens: 0, ..SamplingParams::default() }
            .validate()
            .is_err());
        assert!(SamplingParams { nucleus_p: 1.0, ..SamplingParams::default() }.validate().is_ok());
    }

    #[test]
    fn embeddings_are_normalized() {
        let e = TokenEmbeddings::new(
            vec!["a".into(), "b".into()],
            vec![vec![3.0, 4.0], vec![0.0, -2.0]],
        )
        .unwrap();
        assert_eq!(e.vectors()[0], vec![0.6, 0.8]);
        assert_eq!(e.vectors()[1], vec![0.0, -1.0]);
    }

    #[test]
    fn embeddings_reject_zero_and_ragged() {
        assert!(TokenEmbeddings::new(vec!["a".into()], vec![vec![0.0, 0.0]]).is_err());
        assert!(TokenEmbeddings::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 0.0], vec![1.0]]
        )
        .is_err());
        assert!(matches!(
            TokenEmbeddings::new(vec![], vec![]),
            Err(BackendError::EmptyAfterTokenization)
        ));
    }

    #[test]
    fn retry_stops_after_three_transient_failures() {
        let calls = Cell::new(0);
        let res: Result<(), _> = RetryPolicy { base_delay: Duration::ZERO, ..Default::default() }
            .run(|_| {
                calls.set(calls.get() + 1);
                Err(BackendError::Unreachable("down".into()))
            });
        assert!(res.is_err());
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn retry_does_not_repeat_permanent_failures() {
        let calls = Cell::new(0);
        let res: Result<(), _> = RetryPolicy::default().run(|_| {
            calls.set(calls.get() + 1);
            Err(BackendError::Rejected { status: 400, detail: "bad".into() })
        });
        assert!(res.is_err());
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn retry_recovers() {
        let res = RetryPolicy { base_delay: Duration::ZERO, ..Default::default() }.run(|n| {
            if n < 3 {
                Err(BackendError::Unreachable("flaky".into()))
            } else {
                Ok(n)
            }
        });
        assert_eq!(res.unwrap(), 3);
    }
}
