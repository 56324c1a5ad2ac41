//! Dense embedding contract and the deterministic hashing embedder.

use std::hash::Hasher;

use fnv::FnvHasher;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::stem::stem;
use super::EmbedError;
use crate::text::tokenize;

/// Reference dimension of the sentence encoder being replaced.
pub const REFERENCE_DIM: usize = 768;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseEmbedding {
    pub values: Vec<f64>,
    pub unit_norm: bool,
}

impl DenseEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-length copy; the zero vector stays zero.
    pub fn normalized(&self) -> DenseEmbedding {
        let n = self.norm();
        if n == 0.0 {
            return DenseEmbedding {
                values: self.values.clone(),
                unit_norm: false,
            };
        }
        DenseEmbedding {
            values: self.values.iter().map(|v| v / n).collect(),
            unit_norm: true,
        }
    }
}

/// Cosine similarity; zero if either side is the zero vector. Identical
/// inputs give exactly 1.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub text: String,
    /// Byte offsets into the embedded text.
    pub start: usize,
    pub end: usize,
}

/// Contextual token representations; row `i` belongs to `tokens[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    pub tokens: Vec<TokenSpan>,
    pub matrix: Array2<f64>,
}

impl TokenEmbeddings {
    pub fn mean_pooled(&self) -> Array1<f64> {
        self.matrix
            .mean_axis(Axis(0))
            .unwrap_or_else(|| Array1::zeros(self.matrix.ncols()))
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize;

    /// Whether [`EmbeddingProvider::embed_tokens`] is available.
    fn supports_tokens(&self) -> bool {
        false
    }

    fn embed(&self, text: &str) -> Result<DenseEmbedding, EmbedError>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<DenseEmbedding>, EmbedError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }

    fn embed_tokens(&self, _text: &str) -> Result<TokenEmbeddings, EmbedError> {
        Err(EmbedError::Unsupported {
            provider: self.name().to_string(),
        })
    }

    fn health(&self) -> Result<(), EmbedError> {
        Ok(())
    }
}

/// Deterministic embedder for tests and offline runs.
///
/// Every stemmed, lowercased token is hashed into `HASHES_PER_TOKEN` signed
/// buckets. Token rows are scaled by the inverse norm of their mean, so the
/// mean of the rows (the sentence embedding) has unit length.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    seed: u64,
    name: String,
}

const HASHES_PER_TOKEN: u64 = 4;

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashingEmbedder {
            dim: dim.max(1),
            seed,
            name: format!("hashing-{dim}-s{seed}"),
        }
    }

    fn token_vector(&self, token: &str, out: &mut [f64]) {
        let scale = 1.0 / (HASHES_PER_TOKEN as f64).sqrt();
        for k in 0..HASHES_PER_TOKEN {
            let mut h = FnvHasher::default();
            h.write_u64(self.seed);
            h.write_u64(k);
            h.write(token.as_bytes());
            let v = h.finish();
            let bucket = (v % self.dim as u64) as usize;
            let sign = if (v >> 63) == 1 { -1.0 } else { 1.0 };
            out[bucket] += sign * scale;
        }
    }

    fn normal_form(token: &str, is_mask: bool) -> String {
        if is_mask {
            token.to_string()
        } else {
            stem(&token.to_lowercase())
        }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(REFERENCE_DIM, 0)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn supports_tokens(&self) -> bool {
        true
    }

    fn embed(&self, text: &str) -> Result<DenseEmbedding, EmbedError> {
        let tokens = self.embed_tokens(text)?;
        let pooled = tokens.mean_pooled();
        let unit_norm = !tokens.tokens.is_empty() && pooled.iter().any(|&v| v != 0.0);
        Ok(DenseEmbedding {
            values: pooled.to_vec(),
            unit_norm,
        })
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, EmbedError> {
        let toks = tokenize(text);
        let mut matrix = Array2::<f64>::zeros((toks.len(), self.dim));
        for (i, t) in toks.iter().enumerate() {
            let form = Self::normal_form(t.text, t.is_mask());
            let mut row = matrix.row_mut(i);
            self.token_vector(&form, row.as_slice_mut().expect("row-major"));
        }
        if !toks.is_empty() {
            let mean = matrix.mean_axis(Axis(0)).expect("non-empty");
            let norm = mean.dot(&mean).sqrt();
            if norm > 0.0 {
                matrix.mapv_inplace(|v| v / norm);
            }
        }
        Ok(TokenEmbeddings {
            tokens: toks
                .iter()
                .map(|t| TokenSpan {
                    text: t.text.to_string(),
                    start: t.start,
                    end: t.end,
                })
                .collect(),
            matrix,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashingEmbedder::default();
        let a = e.embed("Need a referral for [FIRM_NAME], thanks!").unwrap();
        let b = e.embed("Need a referral for [FIRM_NAME], thanks!").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), REFERENCE_DIM);
        assert!(a.unit_norm);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&a.values, &b.values), 1.0);
    }

    #[test]
    fn pooled_tokens_equal_sentence_embedding() {
        let e = HashingEmbedder::new(64, 7);
        let text = "Seeking a referral. I am a [ROLE] in [LOCATION].";
        let toks = e.embed_tokens(text).unwrap();
        let pooled = toks.mean_pooled();
        let sent = e.embed(text).unwrap();
        for (p, s) in pooled.iter().zip(&sent.values) {
            assert!((p - s).abs() < 1e-6);
        }
        for t in &toks.tokens {
            assert_eq!(&text[t.start..t.end], t.text);
        }
    }

    #[test]
    fn similar_texts_are_closer() {
        let e = HashingEmbedder::default();
        let a = e.embed("referral for backend role, thanks so much").unwrap();
        let b = e.embed("referral for a backend role thank you").unwrap();
        let c = e.embed("weather was nice at the beach yesterday").unwrap();
        assert!(cosine(&a.values, &b.values) > cosine(&a.values, &c.values));
    }

    #[test]
    fn empty_text_is_zero() {
        let e = HashingEmbedder::new(16, 0);
        let z = e.embed("").unwrap();
        assert!(!z.unit_norm);
        assert!(z.values.iter().all(|&v| v == 0.0));
    }
}
