//! Model capabilities used by the pipeline: teacher-forced prompt logprobs
//! ("echo"), free-running generation, and text embedding.
//!
//! Three implementations ship: an OpenAI-compatible HTTP client, an offline
//! byte-level n-gram model, and a feature-hashing embedder. Any of them can
//! be wrapped in [`cache::Cached`] so repeated requests are served locally.

pub mod cache;
pub mod hash_embed;
pub mod http;
pub mod ngram;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::short_hash;
use crate::prompt::TokenOffsets;
use crate::scoring::{ScoringError, TokenDistribution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("{0}")]
    Unsupported(String),
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("malformed backend response: {0}")]
    InvalidResponse(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Transport errors, 429 and 5xx are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || (500..600).contains(status),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Ngram,
    HashEmbed,
    /// Rule-based offline policy (see `environments::toyshop::ScriptedShopper`).
    Scripted,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Http => "http",
            BackendKind::Ngram => "ngram",
            BackendKind::HashEmbed => "hash_embed",
            BackendKind::Scripted => "scripted",
        }
    }
}

/// Identity of a model. The fingerprint stands in for its parameters.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BackendId {
    pub kind: BackendKind,
    pub model: String,
    pub endpoint: String,
    pub fingerprint: String,
}

impl BackendId {
    /// `extra` carries anything else that changes outputs (e.g. a corpus hash).
    pub fn new(kind: BackendKind, model: &str, endpoint: &str, extra: &str) -> Self {
        let material = format!("{}\n{}\n{}\n{}", kind.name(), model, endpoint, extra);
        Self {
            kind,
            model: model.to_string(),
            endpoint: endpoint.to_string(),
            fingerprint: short_hash(material.as_bytes()),
        }
    }

    /// Compact label written into score files.
    pub fn label(&self) -> String {
        format!("{}:{}@{}", self.kind.name(), self.model, self.fingerprint)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoToken {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
    /// `None` where the backend has no conditional (typically the first token).
    pub logprob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top: Option<Vec<TopLogprob>>,
}

impl EchoToken {
    pub fn distribution(&self) -> Option<Result<TokenDistribution, ScoringError>> {
        self.top.as_ref().map(|top| {
            TokenDistribution::new(top.iter().map(|t| (t.token.clone(), t.logprob)).collect())
        })
    }
}

impl TokenOffsets for EchoToken {
    fn token_text(&self) -> &str {
        &self.text
    }
    fn char_start(&self) -> usize {
        self.char_start
    }
    fn char_end(&self) -> usize {
        self.char_end
    }
}

/// Teacher-forced log-probabilities for every token of a text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoResult {
    pub tokens: Vec<EchoToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateParams {
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub stop: Vec<String>,
}

impl Default for GenerateParams {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            temperature: 0.7,
            top_p: 0.95,
            stop: Vec::new(),
        }
    }
}

pub trait EchoScorer: Send + Sync {
    fn id(&self) -> &BackendId;
    fn echo_logprobs(&self, text: &str, want_top_k: usize) -> Result<EchoResult, BackendError>;
}

pub trait Generator: Send + Sync {
    fn id(&self) -> &BackendId;
    /// Raw completion; callers go through [`generate`] for stop handling.
    fn complete(&self, prompt: &str, params: &GenerateParams) -> Result<String, BackendError>;
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> &BackendId;
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

/// Cuts `raw` at the earliest occurrence of any stop sequence.
pub fn truncate_at_stop<'a>(raw: &'a str, stop: &[String]) -> &'a str {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| raw.find(s.as_str()))
        .min()
        .unwrap_or(raw.len());
    &raw[..cut]
}

/// Generation with stop-sequence truncation and the empty-output check.
pub fn generate<G: Generator + ?Sized>(
    backend: &G,
    prompt: &str,
    params: &GenerateParams,
) -> Result<String, BackendError> {
    if params.max_tokens == 0 {
        return Err(BackendError::Config("max_tokens must be at least 1".into()));
    }
    let raw = backend.complete(prompt, params)?;
    let text = truncate_at_stop(&raw, &params.stop);
    if text.is_empty() {
        return Err(BackendError::EmptyCompletion);
    }
    Ok(text.to_string())
}

/// Wrapper that counts calls reaching the inner backend.
pub struct Counting<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B> Counting<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: EchoScorer> EchoScorer for Counting<B> {
    fn id(&self) -> &BackendId {
        self.inner.id()
    }
    fn echo_logprobs(&self, text: &str, want_top_k: usize) -> Result<EchoResult, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.echo_logprobs(text, want_top_k)
    }
}

impl<B: Generator> Generator for Counting<B> {
    fn id(&self) -> &BackendId {
        self.inner.id()
    }
    fn complete(&self, prompt: &str, params: &GenerateParams) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(prompt, params)
    }
}

impl<B: Embedder> Embedder for Counting<B> {
    fn id(&self) -> &BackendId {
        self.inner.id()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed(text)
    }
}

impl<T: EchoScorer + ?Sized> EchoScorer for std::sync::Arc<T> {
    fn id(&self) -> &BackendId {
        (**self).id()
    }
    fn echo_logprobs(&self, text: &str, want_top_k: usize) -> Result<EchoResult, BackendError> {
        (**self).echo_logprobs(text, want_top_k)
    }
}

impl<T: Generator + ?Sized> Generator for std::sync::Arc<T> {
    fn id(&self) -> &BackendId {
        (**self).id()
    }
    fn complete(&self, prompt: &str, params: &GenerateParams) -> Result<String, BackendError> {
        (**self).complete(prompt, params)
    }
}

impl<T: Embedder + ?Sized> Embedder for std::sync::Arc<T> {
    fn id(&self) -> &BackendId {
        (**self).id()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(text)
    }
}

impl<T: EchoScorer + ?Sized> EchoScorer for &T {
    fn id(&self) -> &BackendId {
        (**self).id()
    }
    fn echo_logprobs(&self, text: &str, want_top_k: usize) -> Result<EchoResult, BackendError> {
        (**self).echo_logprobs(text, want_top_k)
    }
}

impl<T: Generator + ?Sized> Generator for &T {
    fn id(&self) -> &BackendId {
        (**self).id()
    }
    fn complete(&self, prompt: &str, params: &GenerateParams) -> Result<String, BackendError> {
        (**self).complete(prompt, params)
    }
}

impl<T: Embedder + ?Sized> Embedder for &T {
    fn id(&self) -> &BackendId {
        (**self).id()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(text)
    }
}

/// Cosine similarity; zero vectors are orthogonal to everything.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
