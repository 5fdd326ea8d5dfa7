//! Byte-level n-gram model with add-one smoothing.
//!
//! `order` is the context length in bytes, so an order-2 model predicts
//! `b` from the two preceding bytes:
//!
//! ```text
//! P(b | ctx) = (count(ctx·b) + 1) / (count(ctx) + 256)
//! ```
//!
//! where `count(ctx)` is the number of times `ctx` is followed by any byte,
//! which keeps every conditional normalized. Near the start of a text the
//! context is whatever precedes the position.
//!
//! When `adaptive` is set (the default), counts also include the part of
//! the text already scored, like a cache language model. That is what lets
//! material earlier in a prompt, such as a guideline, change how likely a
//! later action is. A plain static n-gram only ever sees the last few bytes.
//!
//! Echo tokens are UTF-8 characters; a character's logprob is the sum of its
//! bytes' conditionals and its top-k list ranks candidate first bytes.

use rustc_hash::FxHashMap;
use sha2::{Digest, Sha256};

use super::{
    BackendError, BackendId, BackendKind, EchoResult, EchoScorer, EchoToken, GenerateParams,
    Generator, TopLogprob,
};

pub const MAX_ORDER: usize = 5;
const VOCAB: f64 = 256.0;

#[derive(Debug, Clone, Default)]
struct Successors {
    total: u32,
    /// Sorted by byte.
    next: Vec<(u8, u32)>,
}

impl Successors {
    fn count(&self, b: u8) -> u32 {
        match self.next.binary_search_by_key(&b, |&(x, _)| x) {
            Ok(i) => self.next[i].1,
            Err(_) => 0,
        }
    }

    fn add(&mut self, b: u8) {
        self.total += 1;
        match self.next.binary_search_by_key(&b, |&(x, _)| x) {
            Ok(i) => self.next[i].1 += 1,
            Err(i) => self.next.insert(i, (b, 1)),
        }
    }
}

type Table = FxHashMap<u64, Successors>;

fn context_key(ctx: &[u8]) -> u64 {
    let mut key = ctx.len() as u64;
    for (i, &b) in ctx.iter().enumerate() {
        key |= (b as u64) << (8 * (i + 1));
    }
    key
}

#[derive(Debug, Clone)]
pub struct NgramModel {
    id: BackendId,
    order: usize,
    adaptive: bool,
    table: Table,
}

impl NgramModel {
    /// Trains an adaptive model on `corpus`.
    pub fn train(corpus: &str, order: usize) -> Result<Self, BackendError> {
        Self::train_with(corpus, order, true)
    }

    pub fn train_with(corpus: &str, order: usize, adaptive: bool) -> Result<Self, BackendError> {
        if !(1..=MAX_ORDER).contains(&order) {
            return Err(BackendError::Config(format!(
                "ngram order {order} outside 1..={MAX_ORDER}"
            )));
        }
        let bytes = corpus.as_bytes();
        let mut table = Table::default();
        for j in 0..bytes.len() {
            for len in 0..=order.min(j) {
                table
                    .entry(context_key(&bytes[j - len..j]))
                    .or_default()
                    .add(bytes[j]);
            }
        }
        let corpus_hash = hex::encode(Sha256::digest(bytes));
        let model = format!(
            "byte-order{order}{}",
            if adaptive { "-adaptive" } else { "" }
        );
        let id = BackendId::new(BackendKind::Ngram, &model, "", &corpus_hash);
        Ok(Self {
            id,
            order,
            adaptive,
            table,
        })
    }

    pub fn backend_id(&self) -> &BackendId {
        &self.id
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn is_adaptive(&self) -> bool {
        self.adaptive
    }

    /// Conditional probability of `b` after `history` under corpus counts only.
    pub fn probability(&self, history: &[u8], b: u8) -> f64 {
        let ctx = &history[history.len().saturating_sub(self.order)..];
        let s = self.table.get(&context_key(ctx));
        let (c_b, c_ctx) = s.map_or((0, 0), |s| (s.count(b), s.total));
        (c_b as f64 + 1.0) / (c_ctx as f64 + VOCAB)
    }

    fn walker(&self) -> Walker<'_> {
        Walker {
            model: self,
            seen: Table::default(),
        }
    }
}

/// Scans a byte stream, optionally learning from it as it goes.
struct Walker<'a> {
    model: &'a NgramModel,
    seen: Table,
}

impl Walker<'_> {
    fn counts(&self, key: u64, b: u8) -> (u32, u32) {
        let mut c_b = 0;
        let mut c_ctx = 0;
        for table in [&self.model.table, &self.seen] {
            if let Some(s) = table.get(&key) {
                c_b += s.count(b);
                c_ctx += s.total;
            }
        }
        (c_b, c_ctx)
    }

    fn logprob(&self, key: u64, b: u8) -> f64 {
        let (c_b, c_ctx) = self.counts(key, b);
        ((c_b as f64 + 1.0) / (c_ctx as f64 + VOCAB)).ln()
    }

    /// Successor counts merged across corpus and seen text, best first,
    /// ties by byte value. Unseen bytes follow in byte order.
    fn ranked(&self, key: u64) -> (Vec<(u8, u32)>, u32) {
        let mut merged: Vec<(u8, u32)> = Vec::new();
        let mut total = 0;
        for table in [&self.model.table, &self.seen] {
            if let Some(s) = table.get(&key) {
                total += s.total;
                for &(b, c) in &s.next {
                    match merged.iter_mut().find(|(x, _)| *x == b) {
                        Some(slot) => slot.1 += c,
                        None => merged.push((b, c)),
                    }
                }
            }
        }
        merged.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        (merged, total)
    }

    fn top_k(&self, key: u64, k: usize) -> Vec<TopLogprob> {
        let (ranked, total) = self.ranked(key);
        let denom = total as f64 + VOCAB;
        let mut out: Vec<TopLogprob> = ranked
            .iter()
            .take(k)
            .map(|&(b, c)| TopLogprob {
                token: byte_token(b),
                logprob: ((c as f64 + 1.0) / denom).ln(),
            })
            .collect();
        let mut b = 0u16;
        while out.len() < k && b < 256 {
            if !ranked.iter().any(|&(x, _)| x as u16 == b) {
                out.push(TopLogprob {
                    token: byte_token(b as u8),
                    logprob: (1.0 / denom).ln(),
                });
            }
            b += 1;
        }
        out
    }

    fn observe(&mut self, key: u64, b: u8) {
        if self.model.adaptive {
            self.seen.entry(key).or_default().add(b);
        }
    }

    fn key_at(&self, bytes: &[u8], i: usize) -> u64 {
        context_key(&bytes[i.saturating_sub(self.model.order)..i])
    }
}

fn byte_token(b: u8) -> String {
    if b.is_ascii() {
        (b as char).to_string()
    } else {
        format!("<0x{b:02X}>")
    }
}

impl EchoScorer for NgramModel {
    fn id(&self) -> &BackendId {
        &self.id
    }

    fn echo_logprobs(&self, text: &str, want_top_k: usize) -> Result<EchoResult, BackendError> {
        if text.is_empty() {
            return Err(BackendError::Config("echo text is empty".into()));
        }
        let bytes = text.as_bytes();
        let mut walker = self.walker();
        let mut tokens = Vec::with_capacity(text.len());
        for (start, ch) in text.char_indices() {
            let end = start + ch.len_utf8();
            let mut logprob = 0.0;
            let mut top = None;
            for i in start..end {
                let key = walker.key_at(bytes, i);
                if i == start && want_top_k > 0 {
                    top = Some(walker.top_k(key, want_top_k));
                }
                logprob += walker.logprob(key, bytes[i]);
                walker.observe(key, bytes[i]);
            }
            tokens.push(EchoToken {
                text: text[start..end].to_string(),
                char_start: start,
                char_end: end,
                logprob: Some(logprob),
                top,
            });
        }
        Ok(EchoResult { tokens })
    }
}

impl Generator for NgramModel {
    fn id(&self) -> &BackendId {
        &self.id
    }

    /// Greedy byte decoding; sampling parameters are ignored.
    fn complete(&self, prompt: &str, params: &GenerateParams) -> Result<String, BackendError> {
        let mut bytes = prompt.as_bytes().to_vec();
        let mut walker = self.walker();
        for i in 0..bytes.len() {
            let key = walker.key_at(&bytes, i);
            walker.observe(key, bytes[i]);
        }
        let start = bytes.len();
        for _ in 0..params.max_tokens {
            let key = walker.key_at(&bytes, bytes.len());
            let (ranked, _) = walker.ranked(key);
            let next = ranked.first().map_or(0, |&(b, _)| b);
            walker.observe(key, next);
            bytes.push(next);
            let produced = String::from_utf8_lossy(&bytes[start..]);
            if params
                .stop
                .iter()
                .any(|s| !s.is_empty() && produced.contains(s.as_str()))
            {
                break;
            }
        }
        Ok(String::from_utf8_lossy(&bytes[start..]).into_owned())
    }
}
