//! HTTP client for the generic completion protocol.
//!
//! `POST {base}/v1/completions` takes a [`CompletionRequest`] and answers with
//! a [`CompletionResponse`]. Continuation scoring uses echo mode: the prompt
//! plus candidate is sent with `max_tokens = 0`, `echo = true` and
//! `logprobs = 1`, and the log-probabilities of the tokens starting at or
//! after the prompt's byte length are summed. Token embeddings come from
//! `POST {base}/v1/token_embeddings`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    check_candidates, check_prompt, Backend, BackendError, Capabilities, ContinuationScore,
    EmbeddingProvider, FinishReason, GenerationResult, RetryPolicy, SamplingParams,
    TokenEmbeddings,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub prompt: String,
    pub max_tokens: u32,
    pub top_p: f64,
    pub n: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub tokens: Vec<String>,
    /// The first prompt token has no conditional probability and may be null.
    pub token_logprobs: Vec<Option<f64>>,
    /// Byte offset of each token in prompt + completion.
    pub text_offset: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionChoice {
    pub text: String,
    #[serde(default)]
    pub finish_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<TokenLogprobs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub choices: Vec<CompletionChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbeddingResponse {
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    /// Inserted between prompt and candidate when scoring.
    pub continuation_separator: String,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            model: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            continuation_separator: " ".into(),
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    id: String,
    http: reqwest::blocking::Client,
    calls: AtomicU64,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::InvalidRequest(format!("http client: {e}")))?;
        let id = match &config.model {
            Some(m) => format!("remote:{}#{m}", config.base_url.trim_end_matches('/')),
            None => format!("remote:{}", config.base_url.trim_end_matches('/')),
        };
        Ok(Self { config, id, http, calls: AtomicU64::new(0) })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        self.config.retry.run(|_| {
            self.calls.fetch_add(1, Ordering::Relaxed);
            let mut req = self.http.post(self.url(path)).json(body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req.send().map_err(|e| BackendError::Unreachable(e.to_string()))?;
            let status = resp.status();
            if status.is_server_error() || status.as_u16() == 429 {
                return Err(BackendError::Unreachable(format!("status {status}")));
            }
            if !status.is_success() {
                let detail = resp.text().unwrap_or_default();
                return Err(BackendError::Rejected { status: status.as_u16(), detail });
            }
            resp.json::<Resp>().map_err(|e| BackendError::Decode(e.to_string()))
        })
    }

    fn score_one(&self, prompt: &str, candidate: &str) -> Result<ContinuationScore, BackendError> {
        let full = format!("{prompt}{}{candidate}", self.config.continuation_separator);
        let req = CompletionRequest {
            model: self.config.model.clone(),
            prompt: full,
            max_tokens: 0,
            top_p: 1.0,
            n: 1,
            temperature: 0.0,
            seed: None,
            logprobs: Some(1),
            echo: Some(true),
        };
        let resp: CompletionResponse = self.post("/v1/completions", &req)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Decode("no choices in scoring response".into()))?;
        let lp = choice.logprobs.ok_or_else(|| {
            BackendError::Unsupported { backend: self.id.clone(), capability: "echo log-probabilities" }
        })?;
        sum_continuation_logprobs(&lp, prompt.len(), candidate)
    }
}

/// Sums the log-probabilities of tokens starting at or after `prompt_len`.
fn sum_continuation_logprobs(
    lp: &TokenLogprobs,
    prompt_len: usize,
    candidate: &str,
) -> Result<ContinuationScore, BackendError> {
    if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
        return Err(BackendError::Decode("logprob arrays differ in length".into()));
    }
    let mut sum = 0.0;
    let mut count = 0u32;
    for (offset, logprob) in lp.text_offset.iter().zip(&lp.token_logprobs) {
        if *offset < prompt_len {
            continue;
        }
        let logprob = logprob
            .ok_or_else(|| BackendError::Decode("missing log-probability for continuation token".into()))?;
        sum += logprob;
        count += 1;
    }
    if count == 0 {
        return Err(BackendError::Decode(format!("no continuation tokens for `{candidate}`")));
    }
    Ok(ContinuationScore { candidate: candidate.to_owned(), log_prob_sum: sum, token_count: count })
}

fn finish_reason(raw: Option<&str>) -> FinishReason {
    match raw {
        Some("length") => FinishReason::Length,
        Some("stop") | Some("eos") | None => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { generation: true, scoring: true, concurrent: true }
    }

    fn generate(
        &self,
        prompt: &str,
        params: &SamplingParams,
    ) -> Result<Vec<GenerationResult>, BackendError> {
        check_prompt(prompt)?;
        params.validate()?;
        let req = CompletionRequest {
            model: self.config.model.clone(),
            prompt: prompt.to_owned(),
            max_tokens: params.max_new_tokens,
            top_p: params.nucleus_p,
            n: params.num_samples,
            temperature: params.temperature.unwrap_or(1.0),
            seed: params.seed,
            logprobs: None,
            echo: None,
        };
        let resp: CompletionResponse = self.post("/v1/completions", &req)?;
        if resp.choices.len() != params.num_samples as usize {
            return Err(BackendError::Decode(format!(
                "expected {} choices, got {}",
                params.num_samples,
                resp.choices.len()
            )));
        }
        Ok(resp
            .choices
            .into_iter()
            .enumerate()
            .map(|(i, c)| GenerationResult {
                finish_reason: finish_reason(c.finish_reason.as_deref()),
                text: c.text,
                sample_index: i as u32,
            })
            .collect())
    }

    fn score_continuations(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<ContinuationScore>, BackendError> {
        check_prompt(prompt)?;
        check_candidates(candidates)?;
        candidates.iter().map(|c| self.score_one(prompt, c)).collect()
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl EmbeddingProvider for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("text to embed is empty".into()));
        }
        let req = EmbeddingRequest { model: self.config.model.clone(), text: text.to_owned() };
        let resp: EmbeddingResponse = self.post("/v1/token_embeddings", &req)?;
        TokenEmbeddings::new(resp.tokens, resp.vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_only_continuation_tokens() {
        let lp = TokenLogprobs {
            tokens: vec!["A".into(), ":".into(), " joy".into(), "ful".into()],
            token_logprobs: vec![None, Some(-0.1), Some(-0.5), Some(-0.25)],
            text_offset: vec![0, 1, 2, 6],
        };
        let s = sum_continuation_logprobs(&lp, 2, "joyful").unwrap();
        assert_eq!(s.log_prob_sum, -0.75);
        assert_eq!(s.token_count, 2);
        assert!(sum_continuation_logprobs(&lp, 100, "x").is_err());
    }

    #[test]
    fn finish_reasons() {
        assert_eq!(finish_reason(Some("length")), FinishReason::Length);
        assert_eq!(finish_reason(Some("stop")), FinishReason::Stop);
        assert_eq!(finish_reason(Some("content_filter")), FinishReason::Error);
    }

    #[test]
    fn request_wire_format() {
        let req = CompletionRequest {
            model: None,
            prompt: "p".into(),
            max_tokens: 60,
            top_p: 0.9,
            n: 10,
            temperature: 1.0,
            seed: Some(3),
            logprobs: None,
            echo: None,
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"prompt":"p","max_tokens":60,"top_p":0.9,"n":10,"temperature":1.0,"seed":3}"#
        );
    }
}
