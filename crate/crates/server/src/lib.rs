//! Annotation API over an augmented dataset.
//!
//! - `GET /api/tasks/next?annotator=ID` next unanswered task, 204 when done
//! - `POST /api/annotations` store an [`AnnotationRecord`], 422 when invalid
//! - `GET /api/summary` per-question answer distribution
//! - `GET /` static annotation UI, if a bundle directory is configured

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use emoreason_core::corpus::{
    read_augmented, AnnotationRecord, AnnotationStore, AnnotationSummary, CorpusError, TaskOrdering, TaskQueue,
    ValidationError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::services::ServeDir;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source} (is another process using the port?)")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("dataset: {0}")]
    Dataset(CorpusError),
    #[error("{0}")]
    Store(CorpusError),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    pub store_dir: PathBuf,
    pub dataset: PathBuf,
    pub ordering: TaskOrdering,
    /// Directory holding the built annotation UI.
    pub ui_dir: Option<PathBuf>,
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<AnnotationStore>,
    pub queue: Arc<TaskQueue>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Accepted {
    pub accepted: bool,
    pub replaced: bool,
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

struct ApiError(StatusCode, ValidationError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn api_error(status: StatusCode, field: &str, message: impl Into<String>) -> ApiError {
    ApiError(status, ValidationError { field: field.into(), message: message.into() })
}

async fn next_task(State(s): State<AppState>, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    let annotator = q.annotator.filter(|a| !a.trim().is_empty()).ok_or_else(|| {
        api_error(StatusCode::BAD_REQUEST, "annotator", "query parameter `annotator` is required")
    })?;
    Ok(match s.queue.next_for(&s.store, &annotator) {
        Some(task) => Json(task.clone()).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit(
    State(s): State<AppState>,
    body: Result<Json<AnnotationRecord>, JsonRejection>,
) -> Result<Json<Accepted>, ApiError> {
    let Json(record) = body.map_err(|e| api_error(StatusCode::UNPROCESSABLE_ENTITY, "body", e.body_text()))?;
    let max_rank = s.queue.max_rank(&record.sample_id).ok_or_else(|| {
        api_error(StatusCode::UNPROCESSABLE_ENTITY, "sample_id", format!("unknown sample `{}`", record.sample_id))
    })?;
    record.validate(max_rank).map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e))?;
    let store = s.store.clone();
    let previous = tokio::task::spawn_blocking(move || store.submit(record))
        .await
        .map_err(|e| api_error(StatusCode::INTERNAL_SERVER_ERROR, "store", e.to_string()))?
        .map_err(|e| api_error(StatusCode::INTERNAL_SERVER_ERROR, "store", e.to_string()))?;
    Ok(Json(Accepted { accepted: true, replaced: previous.is_some() }))
}

async fn summary(State(s): State<AppState>) -> Json<AnnotationSummary> {
    Json(s.store.summary())
}

async fn placeholder() -> Html<&'static str> {
    Html(
        "<!doctype html><title>emoreason annotation</title>\
         <p>No UI bundle configured. API: <code>GET /api/tasks/next?annotator=ID</code>, \
         <code>POST /api/annotations</code>, <code>GET /api/summary</code>.</p>",
    )
}

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/annotations", post(submit))
        .route("/api/summary", get(summary))
        .with_state(state);
    match ui_dir.filter(|d| d.join("index.html").is_file()) {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(placeholder)),
    }
}

/// A bound, not yet running server.
pub struct Server {
    listener: tokio::net::TcpListener,
    state: AppState,
    ui_dir: Option<PathBuf>,
}

impl Server {
    /// Loads the dataset, opens the store and binds the listener. A corrupt
    /// store or an occupied port fails here, before any request is served.
    pub async fn bind(config: ServerConfig) -> Result<Self, ServerError> {
        let records = read_augmented(&config.dataset).map_err(ServerError::Dataset)?;
        let store = AnnotationStore::open(&config.store_dir).map_err(ServerError::Store)?;
        let queue = TaskQueue::new(&records, config.ordering);
        let listener = tokio::net::TcpListener::bind(config.bind)
            .await
            .map_err(|source| ServerError::Bind { addr: config.bind, source })?;
        tracing::info!(tasks = queue.tasks().len(), addr = %listener.local_addr()?, "annotation server bound");
        Ok(Self {
            listener,
            state: AppState { store: Arc::new(store), queue: Arc::new(queue) },
            ui_dir: config.ui_dir,
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn state(&self) -> &AppState {
        &self.state
    }

    /// Serves until `shutdown` resolves, then flushes the store.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServerError> {
        let store = self.state.store.clone();
        let app = router(self.state, self.ui_dir);
        axum::serve(self.listener, app).with_graceful_shutdown(shutdown).await?;
        store.flush().map_err(ServerError::Store)?;
        tracing::info!("annotation store flushed");
        Ok(())
    }
}

/// Resolves on Ctrl-C.
pub async fn ctrl_c() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        tracing::warn!(error = %e, "cannot listen for Ctrl-C");
        std::future::pending::<()>().await;
    }
}
