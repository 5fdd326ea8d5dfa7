//! Content-addressed response cache.
//!
//! Entries live in an append-only log (`responses.jsonl` under the cache
//! directory), one `{key, body}` record per line, and are indexed in memory
//! when the cache is opened. Reads are concurrent; appends are serialized
//! and a key is stored at most once. A torn final line left by a crash is
//! ignored on the next open.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{BackendError, BackendId, EchoResult, EchoScorer, Embedder, GenerateParams, Generator};

pub const DEFAULT_CACHE_DIR: &str = ".ge-cache";
const LOG_FILE: &str = "responses.jsonl";

pub fn cache_key(backend: &BackendId, request_body: &str) -> String {
    let mut h = Sha256::new();
    h.update(backend.fingerprint.as_bytes());
    h.update(request_body.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    body: String,
}

#[derive(Debug)]
pub struct ResponseCache {
    index: RwLock<FxHashMap<String, String>>,
    log: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            index: RwLock::new(FxHashMap::default()),
            log: None,
            path: None,
        }
    }

    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let mut index = FxHashMap::default();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                match serde_json::from_str::<Entry>(&line) {
                    Ok(e) => {
                        index.entry(e.key).or_insert(e.body);
                    }
                    Err(_) if line.trim().is_empty() => {}
                    Err(err) => tracing::warn!(%err, "skipping unreadable cache line"),
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        // a torn last line must not swallow the next append
        let len = file.metadata()?.len();
        if len > 0 {
            let bytes = std::fs::read(&path)?;
            if bytes.last() != Some(&b'\n') {
                file.write_all(b"\n")?;
            }
        }
        Ok(Self {
            index: RwLock::new(index),
            log: Some(Mutex::new(file)),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.index
            .read()
            .expect("cache index poisoned")
            .get(key)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache index poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `body` unless the key is already present.
    pub fn insert(&self, key: &str, body: &str) -> std::io::Result<()> {
        let mut index = self.index.write().expect("cache index poisoned");
        if index.contains_key(key) {
            return Ok(());
        }
        if let Some(log) = &self.log {
            let line = serde_json::to_string(&Entry {
                key: key.to_string(),
                body: body.to_string(),
            })
            .expect("cache entry serializes");
            let mut f = log.lock().expect("cache log poisoned");
            f.write_all(line.as_bytes())?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        index.insert(key.to_string(), body.to_string());
        Ok(())
    }
}

/// Serves repeated requests from a [`ResponseCache`].
pub struct Cached<B> {
    inner: B,
    cache: Arc<ResponseCache>,
}

impl<B> Cached<B> {
    pub fn new(inner: B, cache: Arc<ResponseCache>) -> Self {
        Self { inner, cache }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    fn through<T, F>(
        &self,
        id: &BackendId,
        body: serde_json::Value,
        call: F,
    ) -> Result<T, BackendError>
    where
        T: Serialize + serde::de::DeserializeOwned,
        F: FnOnce() -> Result<T, BackendError>,
    {
        let body = serde_json::to_string(&body).expect("request serializes");
        let key = cache_key(id, &body);
        if let Some(hit) = self.cache.get(&key) {
            if let Ok(v) = serde_json::from_str(&hit) {
                return Ok(v);
            }
        }
        let value = call()?;
        let encoded = serde_json::to_string(&value)
            .map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        if let Err(err) = self.cache.insert(&key, &encoded) {
            tracing::warn!(%err, "failed to persist cache entry");
        }
        Ok(value)
    }
}

impl<B: EchoScorer> EchoScorer for Cached<B> {
    fn id(&self) -> &BackendId {
        self.inner.id()
    }

    fn echo_logprobs(&self, text: &str, want_top_k: usize) -> Result<EchoResult, BackendError> {
        let body = json!({"op": "echo", "text": text, "top_k": want_top_k});
        self.through(self.inner.id(), body, || {
            self.inner.echo_logprobs(text, want_top_k)
        })
    }
}

impl<B: Generator> Generator for Cached<B> {
    fn id(&self) -> &BackendId {
        self.inner.id()
    }

    fn complete(&self, prompt: &str, params: &GenerateParams) -> Result<String, BackendError> {
        let body = json!({"op": "generate", "prompt": prompt, "params": params});
        self.through(self.inner.id(), body, || {
            self.inner.complete(prompt, params)
        })
    }
}

impl<B: Embedder> Embedder for Cached<B> {
    fn id(&self) -> &BackendId {
        self.inner.id()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let body = json!({"op": "embed", "text": text});
        self.through(self.inner.id(), body, || self.inner.embed(text))
    }
}
