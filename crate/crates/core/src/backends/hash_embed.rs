//! Deterministic feature-hashing embedder.
//!
//! Lowercased word unigrams (split on non-alphanumerics) are hashed into
//! signed buckets and the result is L2-normalized. Empty text embeds to the
//! zero vector.

use sha2::{Digest, Sha256};

use super::{BackendError, BackendId, BackendKind, Embedder};

pub const DIMENSIONS: usize = 256;

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    id: BackendId,
    dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DIMENSIONS)
    }
}

/// Bucket and sign for one word.
pub fn feature(word: &str, dim: usize) -> (usize, f64) {
    let digest = Sha256::digest(word.as_bytes());
    let mut raw = [0u8; 8];
    raw.copy_from_slice(&digest[..8]);
    let bucket = (u64::from_le_bytes(raw) % dim as u64) as usize;
    let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
    (bucket, sign)
}

pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        let id = BackendId::new(BackendKind::HashEmbed, &format!("unigram-{dim}"), "", "");
        Self { id, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for w in words(text) {
            let (bucket, sign) = feature(&w, self.dim);
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> &BackendId {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        Ok(self.embed_text(text))
    }
}
