//! Deterministic fixture backend.
//!
//! A [`Script`] holds three tables keyed by exact prompt text: a generation
//! queue, a score table, and a token embedding table. Generation consumes
//! `num_samples` queue entries per call and wraps around when the queue is
//! exhausted.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::embed::{HashEmbedder, TableEmbedder};
use super::{
    check_candidates, check_prompt, Backend, BackendError, Capabilities, ContinuationScore,
    EmbeddingProvider, FinishReason, GenerationResult, SamplingParams, TokenEmbeddings,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashFallback {
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    /// Prompt text → queue of generations.
    #[serde(default)]
    pub generate: BTreeMap<String, Vec<String>>,
    /// Queue used for prompts without their own entry.
    #[serde(default)]
    pub default_generate: Vec<String>,
    /// Prompt text → candidate → summed log-probability.
    #[serde(default)]
    pub scores: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub default_scores: BTreeMap<String, f64>,
    /// Token → embedding vector.
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_fallback: Option<HashFallback>,
}

impl Script {
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let bytes = std::fs::read(path).map_err(|e| {
            BackendError::InvalidRequest(format!("read script {}: {e}", path.display()))
        })?;
        serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::Decode(format!("script {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }
}

pub struct ScriptedBackend {
    id: String,
    script: Script,
    cursors: Mutex<HashMap<String, usize>>,
    embedder: TableEmbedder,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let mut embedder = TableEmbedder::new(script.embeddings.clone());
        if let Some(fb) = script.embedding_fallback {
            embedder = embedder.with_fallback(HashEmbedder::new(fb.dim, fb.seed));
        }
        // the id tracks script content so cached responses never outlive an edit
        let id = format!("scripted:{}", &super::sha256_hex(script.to_json().as_bytes())[..16]);
        Self { id, script, cursors: Mutex::new(HashMap::new()), embedder, calls: AtomicU64::new(0) }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        Script::from_file(path).map(Self::new)
    }

    pub fn script(&self) -> &Script {
        &self.script
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Capabilities {
        // queue cursors make output depend on call order
        Capabilities { generation: true, scoring: true, concurrent: false }
    }

    fn generate(
        &self,
        prompt: &str,
        params: &SamplingParams,
    ) -> Result<Vec<GenerationResult>, BackendError> {
        check_prompt(prompt)?;
        params.validate()?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let queue = self
            .script
            .generate
            .get(prompt)
            .filter(|q| !q.is_empty())
            .unwrap_or(&self.script.default_generate);
        if queue.is_empty() {
            return Err(BackendError::Rejected {
                status: 404,
                detail: format!("no scripted generation for prompt ({} bytes)", prompt.len()),
            });
        }
        let mut cursors = self.cursors.lock().expect("cursor lock poisoned");
        let cursor = cursors.entry(prompt.to_owned()).or_insert(0);
        let out = (0..params.num_samples)
            .map(|i| {
                let text = queue[(*cursor + i as usize) % queue.len()].clone();
                GenerationResult { text, finish_reason: FinishReason::Stop, sample_index: i }
            })
            .collect();
        *cursor = (*cursor + params.num_samples as usize) % queue.len();
        Ok(out)
    }

    fn score_continuations(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<ContinuationScore>, BackendError> {
        check_prompt(prompt)?;
        check_candidates(candidates)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let table = self.script.scores.get(prompt).unwrap_or(&self.script.default_scores);
        candidates
            .iter()
            .map(|c| {
                let log_prob_sum = *table.get(c).ok_or_else(|| BackendError::Rejected {
                    status: 404,
                    detail: format!("no scripted score for candidate `{c}`"),
                })?;
                let token_count = c.split_whitespace().count().max(1) as u32;
                Ok(ContinuationScore { candidate: c.clone(), log_prob_sum, token_count })
            })
            .collect()
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl EmbeddingProvider for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, BackendError> {
        self.embedder.embed_tokens(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend_with_queue(queue: &[&str]) -> ScriptedBackend {
        let mut s = Script::default();
        s.generate.insert("p".into(), queue.iter().map(|q| q.to_string()).collect());
        ScriptedBackend::new(s)
    }

    #[test]
    fn echoes_queue_in_order() {
        let b = backend_with_queue(&["ctx-A", "ctx-B"]);
        let out = b.generate("p", &SamplingParams::with_samples(2)).unwrap();
        assert_eq!(
            out,
            vec![
                GenerationResult { text: "ctx-A".into(), finish_reason: FinishReason::Stop, sample_index: 0 },
                GenerationResult { text: "ctx-B".into(), finish_reason: FinishReason::Stop, sample_index: 1 },
            ]
        );
    }

    #[test]
    fn returns_exactly_num_samples() {
        let b = backend_with_queue(&["a", "b", "c"]);
        let params = SamplingParams { num_samples: 10, nucleus_p: 0.9, max_new_tokens: 60, ..Default::default() };
        let out = b.generate("p", &params).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().enumerate().all(|(i, r)| r.sample_index == i as u32));
        assert_eq!(out[3].text, "a");
    }

    #[test]
    fn unknown_prompt_without_default_is_rejected() {
        let b = backend_with_queue(&["a"]);
        assert!(b.generate("other", &SamplingParams::default()).is_err());
        assert!(b.generate("", &SamplingParams::default()).is_err());
    }

    fn scoring_backend() -> ScriptedBackend {
        let mut s = Script::default();
        s.scores.insert(
            "X".into(),
            BTreeMap::from([("joy".to_string(), -1.2), ("sadness".to_string(), -0.3), ("fear".to_string(), -2.0)]),
        );
        ScriptedBackend::new(s)
    }

    #[test]
    fn score_passthrough() {
        let b = scoring_backend();
        let out = b.score_continuations("X", &["joy".into(), "sadness".into()]).unwrap();
        assert_eq!(out[0].candidate, "joy");
        assert_eq!(out[0].log_prob_sum, -1.2);
        assert_eq!(out[1].candidate, "sadness");
        assert_eq!(out[1].log_prob_sum, -0.3);
        let single = b.score_continuations("X", &["fear".into()]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].candidate, "fear");
    }

    #[test]
    fn permuting_candidates_permutes_scores() {
        let b = scoring_backend();
        let fwd: Vec<String> = ["joy", "sadness", "fear"].map(String::from).to_vec();
        let rev: Vec<String> = fwd.iter().rev().cloned().collect();
        let a = b.score_continuations("X", &fwd).unwrap();
        let mut r = b.score_continuations("X", &rev).unwrap();
        r.reverse();
        assert_eq!(a, r);
    }

    #[test]
    fn score_errors() {
        let b = scoring_backend();
        assert!(b.score_continuations("X", &[]).is_err());
        assert!(b.score_continuations("X", &["joy".into(), " joy ".into()]).is_err());
        assert!(b.score_continuations("X", &["anger".into()]).is_err());
    }

    #[test]
    fn counts_calls() {
        let b = backend_with_queue(&["a"]);
        assert_eq!(b.calls(), 0);
        b.generate("p", &SamplingParams::default()).unwrap();
        b.generate("p", &SamplingParams::default()).unwrap();
        assert_eq!(b.calls(), 2);
    }

    #[test]
    fn script_json_round_trip() {
        let mut s = Script::default();
        s.default_generate.push("x".into());
        s.embeddings.insert("sad".into(), vec![1.0, 0.0]);
        s.embedding_fallback = Some(HashFallback { dim: 8, seed: 1 });
        let back: Script = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }
}
