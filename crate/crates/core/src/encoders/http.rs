//! Remote embedding provider speaking the `/embed` and `/embed_tokens`
//! JSON contract.

use std::time::Duration;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::embedding::{DenseEmbedding, EmbeddingProvider, TokenEmbeddings, TokenSpan};
use super::EmbedError;
use crate::limit::InFlightLimiter;

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct EmbedTokensResponse {
    dim: usize,
    tokens: Vec<Vec<TokenSpan>>,
    matrices: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEmbeddingConfig {
    pub base_url: String,
    pub dimension: usize,
    #[serde(default)]
    pub token_embeddings: bool,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout_secs() -> u64 {
    30
}

pub struct HttpEmbeddingProvider {
    config: HttpEmbeddingConfig,
    name: String,
    agent: ureq::Agent,
    limiter: InFlightLimiter,
}

impl HttpEmbeddingProvider {
    pub fn new(config: HttpEmbeddingConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpEmbeddingProvider {
            name: format!("http:{}", config.base_url.trim_end_matches('/')),
            limiter: InFlightLimiter::new(config.max_in_flight),
            agent,
            config,
        }
    }

    fn post<T: serde::de::DeserializeOwned>(&self, path: &str, texts: &[String]) -> Result<T, EmbedError> {
        let url = format!("{}{}", self.config.base_url.trim_end_matches('/'), path);
        let _permit = self.limiter.acquire();
        let mut resp =
            self.agent
                .post(&url)
                .send_json(EmbedRequest { texts })
                .map_err(|e| EmbedError::Unavailable {
                    message: format!("{url}: {e}"),
                })?;
        let status = resp.status().as_u16();
        if status >= 500 || status == 429 {
            return Err(EmbedError::Unavailable {
                message: format!("{url}: HTTP {status}"),
            });
        }
        if status >= 400 {
            return Err(EmbedError::Protocol {
                message: format!("{url}: HTTP {status}"),
            });
        }
        resp.body_mut().read_json::<T>().map_err(|e| EmbedError::Protocol {
            message: format!("{url}: {e}"),
        })
    }

    fn check_dim(&self, got: usize) -> Result<(), EmbedError> {
        if got != self.config.dimension {
            return Err(EmbedError::DimensionMismatch {
                expected: self.config.dimension,
                got,
            });
        }
        Ok(())
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn supports_tokens(&self) -> bool {
        self.config.token_embeddings
    }

    fn embed(&self, text: &str) -> Result<DenseEmbedding, EmbedError> {
        let mut out = self.embed_batch(&[text.to_string()])?;
        out.pop().ok_or_else(|| EmbedError::Protocol {
            message: "empty vectors array".into(),
        })
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<DenseEmbedding>, EmbedError> {
        let resp: EmbedResponse = self.post("/embed", texts)?;
        self.check_dim(resp.dim)?;
        if resp.vectors.len() != texts.len() {
            return Err(EmbedError::Protocol {
                message: format!("expected {} vectors, got {}", texts.len(), resp.vectors.len()),
            });
        }
        resp.vectors
            .into_iter()
            .map(|values| {
                self.check_dim(values.len())?;
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(EmbedError::Protocol {
                        message: "non-finite embedding value".into(),
                    });
                }
                let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
                Ok(DenseEmbedding {
                    unit_norm: (norm - 1.0).abs() < 1e-6,
                    values,
                })
            })
            .collect()
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, EmbedError> {
        if !self.config.token_embeddings {
            return Err(EmbedError::Unsupported {
                provider: self.name.clone(),
            });
        }
        let resp: EmbedTokensResponse = self.post("/embed_tokens", &[text.to_string()])?;
        self.check_dim(resp.dim)?;
        let (Some(tokens), Some(rows)) = (resp.tokens.into_iter().next(), resp.matrices.into_iter().next()) else {
            return Err(EmbedError::Protocol {
                message: "empty token response".into(),
            });
        };
        if tokens.len() != rows.len() {
            return Err(EmbedError::Protocol {
                message: format!("{} tokens but {} rows", tokens.len(), rows.len()),
            });
        }
        let mut matrix = Array2::zeros((rows.len(), self.config.dimension));
        for (i, row) in rows.into_iter().enumerate() {
            self.check_dim(row.len())?;
            for (j, v) in row.into_iter().enumerate() {
                matrix[[i, j]] = v;
            }
        }
        Ok(TokenEmbeddings { tokens, matrix })
    }
}
