//! Content-addressed response cache.
//!
//! Every request is reduced to a [`CacheKey`] whose canonical form has sorted
//! fields and a fixed float rendering; the SHA-256 of that form names one file
//! in the cache directory holding the response bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{
    check_candidates, check_prompt, Backend, BackendError, Capabilities, ContinuationScore,
    EmbeddingProvider, GenerationResult, SamplingParams, TokenEmbeddings,
};

const ENTRY_EXT: &str = "json";
const TEMP_EXT: &str = "tmp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Generate,
    Score,
    Embed,
}

impl RequestKind {
    fn as_str(self) -> &'static str {
        match self {
            RequestKind::Generate => "generate",
            RequestKind::Score => "score",
            RequestKind::Embed => "embed",
        }
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub backend_id: String,
    pub kind: RequestKind,
    pub canonical_request: String,
}

/// Renders a float so that equal values always produce equal bytes.
fn canonical_float(x: f64) -> Value {
    let x = if x == 0.0 { 0.0 } else { x };
    Value::String(format!("{x:?}"))
}

fn canonical_json(fields: BTreeMap<&str, Value>) -> String {
    serde_json::to_string(&fields).expect("canonical request serializes")
}

impl CacheKey {
    pub fn generate(backend_id: &str, prompt: &str, params: &SamplingParams) -> Self {
        let mut p = BTreeMap::new();
        p.insert("max_new_tokens", Value::from(params.max_new_tokens));
        p.insert("nucleus_p", canonical_float(params.nucleus_p));
        p.insert("num_samples", Value::from(params.num_samples));
        p.insert("seed", params.seed.map_or(Value::Null, Value::from));
        p.insert("temperature", params.temperature.map_or(Value::Null, canonical_float));
        let mut fields = BTreeMap::new();
        fields.insert("params", serde_json::to_value(p).expect("params serialize"));
        fields.insert("prompt", Value::String(prompt.to_owned()));
        Self {
            backend_id: backend_id.to_owned(),
            kind: RequestKind::Generate,
            canonical_request: canonical_json(fields),
        }
    }

    pub fn score(backend_id: &str, prompt: &str, candidates: &[String]) -> Self {
        let mut fields = BTreeMap::new();
        fields.insert(
            "candidates",
            Value::Array(candidates.iter().map(|c| Value::String(c.clone())).collect()),
        );
        fields.insert("prompt", Value::String(prompt.to_owned()));
        Self {
            backend_id: backend_id.to_owned(),
            kind: RequestKind::Score,
            canonical_request: canonical_json(fields),
        }
    }

    pub fn embed(backend_id: &str, text: &str) -> Self {
        let mut fields = BTreeMap::new();
        fields.insert("text", Value::String(text.to_owned()));
        Self {
            backend_id: backend_id.to_owned(),
            kind: RequestKind::Embed,
            canonical_request: canonical_json(fields),
        }
    }

    /// Hex SHA-256 over backend id, request kind and canonical request.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.backend_id.as_bytes());
        h.update([0u8]);
        h.update(self.kind.as_str().as_bytes());
        h.update([0u8]);
        h.update(self.canonical_request.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GcReport {
    pub scanned: usize,
    pub removed_temp: usize,
    pub removed_corrupt: usize,
    pub removed_expired: usize,
    pub kept: usize,
}

/// On-disk cache, one file per key.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| BackendError::Cache(format!("create {}: {e}", dir.display())))?;
        Ok(Self { dir, locks: Mutex::new(HashMap::new()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.{ENTRY_EXT}"))
    }

    fn key_lock(&self, digest: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().expect("cache lock map poisoned");
        locks.entry(digest.to_owned()).or_default().clone()
    }

    pub fn lookup_bytes(&self, key: &CacheKey) -> Option<Vec<u8>> {
        fs::read(self.entry_path(&key.digest())).ok()
    }

    /// Writes atomically: temp file then rename.
    pub fn store_bytes(&self, key: &CacheKey, bytes: &[u8]) -> Result<(), BackendError> {
        let digest = key.digest();
        let lock = self.key_lock(&digest);
        let _guard = lock.lock().expect("cache key lock poisoned");
        self.write_entry(&digest, bytes)
    }

    fn write_entry(&self, digest: &str, bytes: &[u8]) -> Result<(), BackendError> {
        let tmp = self.dir.join(format!(
            "{digest}.{}.{TEMP_EXT}",
            std::process::id()
        ));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, self.entry_path(digest))
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            BackendError::Cache(format!("write entry {digest}: {e}"))
        })
    }

    /// Returns the cached value for `key`, or computes, stores and returns it.
    /// Concurrent callers with the same key run `compute` at most once.
    pub fn get_or_compute<T, F>(&self, key: &CacheKey, compute: F) -> Result<(T, bool), BackendError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T, BackendError>,
    {
        let digest = key.digest();
        let lock = self.key_lock(&digest);
        let _guard = lock.lock().expect("cache key lock poisoned");
        if let Ok(bytes) = fs::read(self.entry_path(&digest)) {
            match serde_json::from_slice(&bytes) {
                Ok(v) => return Ok((v, true)),
                Err(e) => tracing::warn!(%digest, error = %e, "discarding undecodable cache entry"),
            }
        }
        let value = compute()?;
        let bytes = serde_json::to_vec(&value)
            .map_err(|e| BackendError::Cache(format!("encode response: {e}")))?;
        self.write_entry(&digest, &bytes)?;
        Ok((value, false))
    }

    /// Removes leftover temp files, undecodable entries and, when `max_age`
    /// is set, entries last modified longer ago than that.
    pub fn gc(&self, max_age: Option<Duration>) -> Result<GcReport, BackendError> {
        let mut report = GcReport::default();
        let now = SystemTime::now();
        let entries = fs::read_dir(&self.dir)
            .map_err(|e| BackendError::Cache(format!("read {}: {e}", self.dir.display())))?;
        for entry in entries.flatten() {
            let path = entry.path();
            if !path.is_file() {
                continue;
            }
            report.scanned += 1;
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
            let remove = |p: &Path| {
                fs::remove_file(p)
                    .map_err(|e| BackendError::Cache(format!("remove {}: {e}", p.display())))
            };
            if ext == TEMP_EXT {
                remove(&path)?;
                report.removed_temp += 1;
                continue;
            }
            if ext != ENTRY_EXT {
                report.kept += 1;
                continue;
            }
            let decodes = fs::read(&path)
                .ok()
                .and_then(|b| serde_json::from_slice::<Value>(&b).ok())
                .is_some();
            if !decodes {
                remove(&path)?;
                report.removed_corrupt += 1;
                continue;
            }
            let expired = max_age.is_some_and(|age| {
                entry
                    .metadata()
                    .and_then(|m| m.modified())
                    .ok()
                    .and_then(|m| now.duration_since(m).ok())
                    .is_some_and(|d| d > age)
            });
            if expired {
                remove(&path)?;
                report.removed_expired += 1;
            } else {
                report.kept += 1;
            }
        }
        Ok(report)
    }
}

/// Caching decorator over a backend (and embedding provider, when the inner
/// type is one).
pub struct CachedBackend<B> {
    inner: B,
    cache: Arc<ResponseCache>,
    misses: AtomicU64,
    hits: AtomicU64,
}

impl<B> CachedBackend<B> {
    pub fn new(inner: B, cache: Arc<ResponseCache>) -> Self {
        Self { inner, cache, misses: AtomicU64::new(0), hits: AtomicU64::new(0) }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    fn record(&self, hit: bool) {
        if hit {
            self.hits.fetch_add(1, Ordering::Relaxed);
        } else {
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn generate(
        &self,
        prompt: &str,
        params: &SamplingParams,
    ) -> Result<Vec<GenerationResult>, BackendError> {
        check_prompt(prompt)?;
        params.validate()?;
        let key = CacheKey::generate(self.inner.id(), prompt, params);
        let (out, hit) = self.cache.get_or_compute(&key, || self.inner.generate(prompt, params))?;
        self.record(hit);
        Ok(out)
    }

    fn score_continuations(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<ContinuationScore>, BackendError> {
        check_prompt(prompt)?;
        check_candidates(candidates)?;
        let key = CacheKey::score(self.inner.id(), prompt, candidates);
        let (out, hit) = self
            .cache
            .get_or_compute(&key, || self.inner.score_continuations(prompt, candidates))?;
        self.record(hit);
        Ok(out)
    }

    /// Requests forwarded to the wrapped backend.
    fn calls(&self) -> u64 {
        self.misses()
    }
}

impl<B: EmbeddingProvider> EmbeddingProvider for CachedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, BackendError> {
        let key = CacheKey::embed(self.inner.id(), text);
        let (out, hit) = self.cache.get_or_compute(&key, || self.inner.embed_tokens(text))?;
        self.record(hit);
        Ok(out)
    }
}
