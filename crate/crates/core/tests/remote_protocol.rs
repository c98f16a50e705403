//! RemoteBackend against an in-process mock of the completion protocol.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use emoreason_core::backend::{
    Backend, BackendError, EmbeddingProvider, RemoteBackend, RemoteConfig, RetryPolicy, SamplingParams,
};
use serde_json::{json, Value};

#[derive(Default)]
struct Mock {
    requests: Mutex<Vec<(String, Option<String>, Value)>>,
    embed_failures: AtomicUsize,
}

async fn completions(State(m): State<Arc<Mock>>, headers: HeaderMap, Json(body): Json<Value>) -> Json<Value> {
    let auth = headers.get("authorization").map(|v| v.to_str().unwrap().to_owned());
    m.requests.lock().unwrap().push(("completions".into(), auth, body.clone()));
    let prompt = body["prompt"].as_str().unwrap();
    if body["echo"] == json!(true) {
        // whitespace tokenization; each token after the first scores -0.5 per byte
        let mut tokens = Vec::new();
        let mut offsets = Vec::new();
        let mut start = 0;
        for (i, c) in prompt.char_indices() {
            if c == ' ' && i > start {
                tokens.push(prompt[start..i].to_owned());
                offsets.push(start);
                start = i;
            }
        }
        tokens.push(prompt[start..].to_owned());
        offsets.push(start);
        let lps: Vec<Value> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| if i == 0 { Value::Null } else { json!(-0.5 * t.trim().len() as f64) })
            .collect();
        return Json(json!({"choices": [{"text": "", "finish_reason": "length",
            "logprobs": {"tokens": tokens, "token_logprobs": lps, "text_offset": offsets}}]}));
    }
    let n = body["n"].as_u64().unwrap();
    let choices: Vec<Value> = (0..n)
        .map(|i| json!({"text": format!(" sample {i}"), "finish_reason": if i == 0 { "length" } else { "stop" }}))
        .collect();
    Json(json!({ "choices": choices }))
}

async fn embeddings(State(m): State<Arc<Mock>>, Json(body): Json<Value>) -> Result<Json<Value>, StatusCode> {
    m.requests.lock().unwrap().push(("embed".into(), None, body.clone()));
    if m.embed_failures.load(Ordering::SeqCst) > 0 {
        m.embed_failures.fetch_sub(1, Ordering::SeqCst);
        return Err(StatusCode::SERVICE_UNAVAILABLE);
    }
    let text = body["text"].as_str().unwrap();
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let vectors: Vec<Vec<f64>> = tokens.iter().map(|t| vec![t.len() as f64, 1.0]).collect();
    Ok(Json(json!({"tokens": tokens, "vectors": vectors})))
}

fn spawn_mock(mock: Arc<Mock>) -> (String, tokio::runtime::Runtime) {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let app = Router::new()
        .route("/v1/completions", post(completions))
        .route("/v1/token_embeddings", post(embeddings))
        .with_state(mock);
    rt.spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}"), rt)
}

fn backend(url: &str) -> RemoteBackend {
    let mut cfg = RemoteConfig::new(url);
    cfg.api_key = Some("secret".into());
    cfg.model = Some("m".into());
    cfg.retry = RetryPolicy { max_attempts: 3, base_delay: Duration::from_millis(10) };
    RemoteBackend::new(cfg).unwrap()
}

#[test]
fn generation_request_and_response() {
    let mock = Arc::new(Mock::default());
    let (url, _rt) = spawn_mock(mock.clone());
    let b = backend(&url);
    let mut params = SamplingParams::with_samples(3);
    params.seed = Some(9);
    let out = b.generate("hello", &params).unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(out[2].text, " sample 2");
    assert_eq!(out[2].sample_index, 2);

    let reqs = mock.requests.lock().unwrap();
    let (_, auth, body) = &reqs[0];
    assert_eq!(auth.as_deref(), Some("Bearer secret"));
    assert_eq!(
        body,
        &json!({"model": "m", "prompt": "hello", "max_tokens": 60, "top_p": 0.9, "n": 3, "temperature": 1.0, "seed": 9})
    );
    assert_eq!(Backend::id(&b), format!("remote:{url}#m"));
}

#[test]
fn scoring_sums_continuation_tokens_only() {
    let mock = Arc::new(Mock::default());
    let (url, _rt) = spawn_mock(mock.clone());
    let b = backend(&url);
    let scores = b.score_continuations("Q: why? A:", &["joy".into(), "sadness".into()]).unwrap();
    assert_eq!(scores[0].log_prob_sum, -1.5);
    assert_eq!(scores[0].token_count, 1);
    assert_eq!(scores[1].log_prob_sum, -3.5);
    let reqs = mock.requests.lock().unwrap();
    assert_eq!(reqs[0].2["prompt"], "Q: why? A: joy");
    assert_eq!(reqs[0].2["echo"], true);
    assert_eq!(reqs[0].2["max_tokens"], 0);
}

#[test]
fn embeddings_retry_transient_failures() {
    let mock = Arc::new(Mock::default());
    mock.embed_failures.store(2, Ordering::SeqCst);
    let (url, _rt) = spawn_mock(mock.clone());
    let b = backend(&url);
    let e = b.embed_tokens("ab c").unwrap();
    assert_eq!(e.tokens(), ["ab", "c"]);
    assert!((e.vectors()[0].iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(mock.requests.lock().unwrap().len(), 3);
    assert_eq!(b.calls(), 3);
}

#[test]
fn exhausted_retries_surface_as_unreachable() {
    let mock = Arc::new(Mock::default());
    mock.embed_failures.store(10, Ordering::SeqCst);
    let (url, _rt) = spawn_mock(mock.clone());
    let err = backend(&url).embed_tokens("x").unwrap_err();
    assert!(matches!(err, BackendError::Unreachable(_)), "{err}");
    assert_eq!(mock.requests.lock().unwrap().len(), 3);
}

#[test]
fn unreachable_host() {
    let mut cfg = RemoteConfig::new("http://127.0.0.1:9");
    cfg.retry = RetryPolicy::none();
    let err = RemoteBackend::new(cfg).unwrap().generate("p", &SamplingParams::default()).unwrap_err();
    assert!(err.is_transient());
}
