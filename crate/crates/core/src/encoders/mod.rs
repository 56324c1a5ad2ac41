//! Text encoders feeding the reward head: TF-IDF, dense embeddings and the
//! featurized attribute model.

mod embedding;
mod http;
pub mod stem;
mod tfidf;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use embedding::{
    cosine, DenseEmbedding, EmbeddingProvider, HashingEmbedder, TokenEmbeddings, TokenSpan, REFERENCE_DIM,
};
pub use http::{HttpEmbeddingConfig, HttpEmbeddingProvider};
pub use tfidf::{
    analyze, smoothed_idf, SparseVector, StemmerKind, StopwordList, TfidfConfig, TfidfVocabulary, VOCAB_FORMAT,
};

use crate::design::{CsrMatrix, Design};
use crate::features::{featurize_text, Dictionary, FeatureSchema};
use crate::text::request_text;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding provider unavailable: {message}")]
    Unavailable { message: String },
    #[error("embedding dimension mismatch: configured {expected}, provider returned {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("provider {provider} does not expose token embeddings")]
    Unsupported { provider: String },
    #[error("malformed embedding response: {message}")]
    Protocol { message: String },
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Unavailable { .. })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EncodeError {
    #[error("cannot fit an encoder on an empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Tfidf,
    Embedding,
    Featurized,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Tfidf => "tfidf",
            EncoderKind::Embedding => "embedding",
            EncoderKind::Featurized => "featurized",
        }
    }
}

#[derive(Clone)]
pub enum Encoder {
    Tfidf(TfidfVocabulary),
    Embedding(Arc<dyn EmbeddingProvider>),
    Featurized {
        schema: FeatureSchema,
        dictionary: Dictionary,
    },
}

impl std::fmt::Debug for Encoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Encoder({})", self.id())
    }
}

/// One encoded request.
#[derive(Debug, Clone, PartialEq)]
pub enum EncodedRow {
    Dense(Vec<f64>),
    Sparse(SparseVector),
}

impl EncodedRow {
    pub fn dim(&self) -> usize {
        match self {
            EncodedRow::Dense(v) => v.len(),
            EncodedRow::Sparse(s) => s.dim,
        }
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        match self {
            EncodedRow::Dense(v) => v.iter().zip(w).map(|(a, b)| a * b).sum(),
            EncodedRow::Sparse(s) => s.dot_dense(w),
        }
    }
}

impl Encoder {
    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Tfidf(_) => EncoderKind::Tfidf,
            Encoder::Embedding(_) => EncoderKind::Embedding,
            Encoder::Featurized { .. } => EncoderKind::Featurized,
        }
    }

    /// Stable identifier stored alongside trained models.
    pub fn id(&self) -> String {
        match self {
            Encoder::Tfidf(_) => "tfidf".to_string(),
            Encoder::Embedding(p) => format!("embedding:{}", p.name()),
            Encoder::Featurized { .. } => "featurized".to_string(),
        }
    }

    /// Version of the vocabulary or schema the encoder was built from.
    pub fn version(&self) -> String {
        match self {
            Encoder::Tfidf(v) => format!("{}:{}terms", v.format, v.len()),
            Encoder::Embedding(p) => format!("dim{}", p.dimension()),
            Encoder::Featurized { schema, .. } => schema.version().to_string(),
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            Encoder::Tfidf(v) => v.len(),
            Encoder::Embedding(p) => p.dimension(),
            Encoder::Featurized { schema, .. } => schema.dimension(),
        }
    }

    pub fn encode(&self, title: &str, body: &str) -> Result<EncodedRow, EncodeError> {
        Ok(match self {
            Encoder::Tfidf(v) => EncodedRow::Sparse(v.transform(&request_text(title, body))),
            Encoder::Embedding(p) => {
                let e = p.embed(&request_text(title, body))?;
                if e.dim() != p.dimension() {
                    return Err(EmbedError::DimensionMismatch {
                        expected: p.dimension(),
                        got: e.dim(),
                    }
                    .into());
                }
                EncodedRow::Dense(e.values)
            }
            Encoder::Featurized { schema, dictionary } => {
                EncodedRow::Dense(featurize_text(title, body, schema, dictionary).to_dense())
            }
        })
    }

    /// Encodes `(title, body)` pairs into a design matrix, in order.
    pub fn encode_all<S: AsRef<str> + Sync>(&self, items: &[(S, S)]) -> Result<Design, EncodeError> {
        let rows = items
            .par_iter()
            .map(|(t, b)| self.encode(t.as_ref(), b.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(rows_to_design(rows, self.dimension()))
    }
}

pub fn rows_to_design(rows: Vec<EncodedRow>, dim: usize) -> Design {
    if rows.iter().all(|r| matches!(r, EncodedRow::Dense(_))) {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in &rows {
            if let EncodedRow::Dense(v) = r {
                data.extend_from_slice(v);
            }
        }
        Design::Dense(ndarray::Array2::from_shape_vec((rows.len(), dim), data).expect("row lengths match"))
    } else {
        let mut indptr = vec![0usize];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for r in rows {
            match r {
                EncodedRow::Sparse(s) => {
                    for (i, v) in s.entries {
                        indices.push(i as usize);
                        values.push(v);
                    }
                }
                EncodedRow::Dense(v) => {
                    for (i, x) in v.into_iter().enumerate() {
                        if x != 0.0 {
                            indices.push(i);
                            values.push(x);
                        }
                    }
                }
            }
            indptr.push(indices.len());
        }
        Design::Sparse(CsrMatrix::new(dim, indptr, indices, values))
    }
}
