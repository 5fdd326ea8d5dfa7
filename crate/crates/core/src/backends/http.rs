//! OpenAI-compatible HTTP client.
//!
//! Scoring uses `POST {endpoint}/completions` with `echo: true`,
//! `max_tokens: 0` and `logprobs: K`; the response's legacy `logprobs`
//! block supplies prompt tokens and their conditionals. Chat-only servers
//! cannot do this and are rejected with an explanatory error.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    BackendError, BackendId, BackendKind, EchoResult, EchoScorer, EchoToken, Embedder,
    GenerateParams, Generator, TopLogprob,
};

pub const API_KEY_ENV: &str = "GE_API_KEY";

const NO_ECHO_HINT: &str = "endpoint did not return prompt-token logprobs; scoring needs a \
completions endpoint that honours echo=true with logprobs (chat-only APIs do not expose them)";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retries: u32,
    /// Delay before the first retry; doubled each time.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn run<T>(
        &self,
        mut attempt: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut tries = 0;
        loop {
            match attempt() {
                Err(e) if e.is_retryable() && tries < self.retries => {
                    let wait = self.base_delay * 2u32.pow(tries);
                    tracing::warn!(error = %e, attempt = tries + 1, ?wait, "retrying request");
                    std::thread::sleep(wait);
                    tries += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(endpoint: &str, model: &str) -> Self {
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
        }
    }
}

pub struct HttpBackend {
    id: BackendId,
    config: HttpConfig,
    client: reqwest::blocking::Client,
    limiter: Limiter,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            id: BackendId::new(BackendKind::Http, &config.model, &config.endpoint, ""),
            limiter: Limiter::new(config.max_in_flight),
            config,
            client,
        })
    }

    fn post(&self, route: &str, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}/{}", self.config.endpoint, route);
        self.config.retry.run(|| {
            let _permit = self.limiter.acquire();
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req
                .send()
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            let status = resp.status();
            let text = resp
                .text()
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            if !status.is_success() {
                return Err(BackendError::Status {
                    status: status.as_u16(),
                    body: text.chars().take(500).collect(),
                });
            }
            serde_json::from_str(&text).map_err(|e| BackendError::InvalidResponse(e.to_string()))
        })
    }
}

pub fn scoring_request(model: &str, prompt: &str, top_k: usize) -> Value {
    json!({
        "model": model,
        "prompt": prompt,
        "max_tokens": 0,
        "echo": true,
        "logprobs": top_k,
        "temperature": 0,
    })
}

pub fn generation_request(model: &str, prompt: &str, params: &GenerateParams) -> Value {
    json!({
        "model": model,
        "prompt": prompt,
        "max_tokens": params.max_tokens,
        "temperature": params.temperature,
        "top_p": params.top_p,
        "stop": params.stop,
    })
}

/// Parses a legacy completions `logprobs` block into tokens tiling `prompt`.
pub fn parse_echo_response(prompt: &str, response: &Value) -> Result<EchoResult, BackendError> {
    let choice = response
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Unsupported(NO_ECHO_HINT.into()))?;
    let logprobs = choice
        .get("logprobs")
        .filter(|l| !l.is_null())
        .ok_or_else(|| BackendError::Unsupported(NO_ECHO_HINT.into()))?;
    let tokens = logprobs
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Unsupported(NO_ECHO_HINT.into()))?;
    let token_logprobs = logprobs
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Unsupported(NO_ECHO_HINT.into()))?;
    if token_logprobs.len() != tokens.len() {
        return Err(BackendError::InvalidResponse(
            "tokens and token_logprobs differ in length".into(),
        ));
    }
    let tops = logprobs.get("top_logprobs").and_then(Value::as_array);

    let mut out = Vec::with_capacity(tokens.len());
    let mut pos = 0;
    for (i, tok) in tokens.iter().enumerate() {
        if pos == prompt.len() {
            // servers that insist on one generated token append it here
            break;
        }
        let text = tok
            .as_str()
            .ok_or_else(|| BackendError::InvalidResponse(format!("token {i} is not a string")))?;
        let end = pos + text.len();
        if prompt.get(pos..end) != Some(text) {
            return Err(BackendError::InvalidResponse(format!(
                "token {i} does not continue the prompt at byte {pos}"
            )));
        }
        let logprob = match &token_logprobs[i] {
            Value::Null => None,
            v => Some(
                v.as_f64()
                    .ok_or_else(|| {
                        BackendError::InvalidResponse(format!("token {i} logprob is not a number"))
                    })?
                    .min(0.0),
            ),
        };
        let top = tops
            .and_then(|t| t.get(i))
            .and_then(Value::as_object)
            .map(normalized_top);
        out.push(EchoToken {
            text: text.to_string(),
            char_start: pos,
            char_end: end,
            logprob,
            top,
        });
        pos = end;
    }
    if pos != prompt.len() {
        return Err(BackendError::InvalidResponse(
            "tokens do not cover the whole prompt".into(),
        ));
    }
    Ok(EchoResult { tokens: out })
}

/// Sorts alternatives best first and rescales if rounding pushed their
/// total mass above one.
fn normalized_top(m: &serde_json::Map<String, Value>) -> Vec<TopLogprob> {
    let mut top: Vec<TopLogprob> = m
        .iter()
        .filter_map(|(k, v)| {
            v.as_f64().map(|lp| TopLogprob {
                token: k.clone(),
                logprob: lp.min(0.0),
            })
        })
        .collect();
    top.sort_by(|a, b| {
        b.logprob
            .total_cmp(&a.logprob)
            .then_with(|| a.token.cmp(&b.token))
    });
    let mass: f64 = top.iter().map(|t| t.logprob.exp()).sum();
    if mass > 1.0 {
        let shift = mass.ln();
        top.iter_mut()
            .for_each(|t| t.logprob = (t.logprob - shift).min(0.0));
    }
    top
}

impl EchoScorer for HttpBackend {
    fn id(&self) -> &BackendId {
        &self.id
    }

    fn echo_logprobs(&self, text: &str, want_top_k: usize) -> Result<EchoResult, BackendError> {
        if text.is_empty() {
            return Err(BackendError::Config("echo text is empty".into()));
        }
        let body = scoring_request(&self.config.model, text, want_top_k);
        let resp = self.post("completions", &body)?;
        parse_echo_response(text, &resp)
    }
}

impl Generator for HttpBackend {
    fn id(&self) -> &BackendId {
        &self.id
    }

    fn complete(&self, prompt: &str, params: &GenerateParams) -> Result<String, BackendError> {
        let body = generation_request(&self.config.model, prompt, params);
        let resp = self.post("completions", &body)?;
        resp.get("choices")
            .and_then(|c| c.get(0))
            .and_then(|c| c.get("text"))
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                BackendError::InvalidResponse("completion has no choices[0].text".into())
            })
    }
}

impl Embedder for HttpBackend {
    fn id(&self) -> &BackendId {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let body = json!({"model": self.config.model, "input": text});
        let resp = self.post("embeddings", &body)?;
        resp.get("data")
            .and_then(|d| d.get(0))
            .and_then(|d| d.get("embedding"))
            .and_then(Value::as_array)
            .and_then(|v| v.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
            .ok_or_else(|| {
                BackendError::InvalidResponse("embedding response has no data[0].embedding".into())
            })
    }
}
