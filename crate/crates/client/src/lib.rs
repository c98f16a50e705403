//! Typed client for the annotation API.

use emoreason_core::corpus::{AnnotationRecord, AnnotationSummary, Task, ValidationError};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("rejected: {0}")]
    Invalid(ValidationError),
    #[error("server returned {status}: {body}")]
    Status { status: u16, body: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accepted {
    pub accepted: bool,
    pub replaced: bool,
}

#[derive(Debug, Clone)]
pub struct AnnotationClient {
    base: String,
    http: reqwest::Client,
}

impl AnnotationClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self { base: base_url.into().trim_end_matches('/').to_owned(), http: reqwest::Client::new() }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let body = resp.text().await.unwrap_or_default();
        if status == StatusCode::UNPROCESSABLE_ENTITY || status == StatusCode::BAD_REQUEST {
            if let Ok(v) = serde_json::from_str::<ValidationError>(&body) {
                return Err(ClientError::Invalid(v));
            }
        }
        Err(ClientError::Status { status: status.as_u16(), body })
    }

    /// The next task for `annotator`, or `None` once every task is answered.
    pub async fn next_task(&self, annotator: &str) -> Result<Option<Task>, ClientError> {
        let resp = self.http.get(self.url("/api/tasks/next")).query(&[("annotator", annotator)]).send().await?;
        let resp = Self::check(resp).await?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        Ok(Some(resp.json().await?))
    }

    pub async fn submit(&self, record: &AnnotationRecord) -> Result<Accepted, ClientError> {
        let resp = self.http.post(self.url("/api/annotations")).json(record).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    pub async fn summary(&self) -> Result<AnnotationSummary, ClientError> {
        let resp = self.http.get(self.url("/api/summary")).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }
}
