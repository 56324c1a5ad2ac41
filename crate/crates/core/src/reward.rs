//! A trained head paired with the encoder it was fit on.

use rayon::prelude::*;

use crate::encoders::{EncodeError, Encoder};
use crate::model::{sigmoid, LogisticModel, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("model was trained with encoder {model:?} but {encoder:?} was supplied")]
    EncoderMismatch { model: String, encoder: String },
}

impl RewardError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, RewardError::Encode(EncodeError::Embed(e)) if e.is_retryable())
    }
}

/// The frozen reward model: text in, success probability out.
#[derive(Debug, Clone)]
pub struct RewardModel {
    model: LogisticModel,
    encoder: Encoder,
}

impl RewardModel {
    pub fn new(model: LogisticModel, encoder: Encoder) -> Result<Self, RewardError> {
        if model.encoder_id != encoder.id() {
            return Err(RewardError::EncoderMismatch {
                model: model.encoder_id.clone(),
                encoder: encoder.id(),
            });
        }
        if model.dimension() != encoder.dimension() {
            return Err(ModelError::DimensionMismatch {
                expected: model.dimension(),
                got: encoder.dimension(),
            }
            .into());
        }
        Ok(RewardModel { model, encoder })
    }

    pub fn model(&self) -> &LogisticModel {
        &self.model
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn logit(&self, title: &str, body: &str) -> Result<f64, RewardError> {
        let row = self.encoder.encode(title, body)?;
        Ok(self.model.logit_of(&row)?)
    }

    pub fn score(&self, title: &str, body: &str) -> Result<f64, RewardError> {
        self.logit(title, body).map(sigmoid)
    }

    pub fn score_many<S: AsRef<str> + Sync>(&self, items: &[(S, S)]) -> Result<Vec<f64>, RewardError> {
        items
            .par_iter()
            .map(|(t, b)| self.score(t.as_ref(), b.as_ref()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::encoders::HashingEmbedder;
    use crate::model::MODEL_FORMAT;

    #[test]
    fn rejects_mismatched_encoder() {
        let enc = Encoder::Embedding(Arc::new(HashingEmbedder::new(8, 0)));
        let model = LogisticModel {
            format: MODEL_FORMAT.into(),
            weights: vec![0.0; 8],
            bias: 0.0,
            lambda: 0.0,
            encoder_id: "tfidf".into(),
            encoder_version: String::new(),
        };
        assert!(matches!(
            RewardModel::new(model.clone(), enc.clone()),
            Err(RewardError::EncoderMismatch { .. })
        ));
        let ok = RewardModel::new(
            LogisticModel {
                encoder_id: enc.id(),
                ..model
            },
            enc,
        )
        .unwrap();
        assert_eq!(ok.score("t", "b").unwrap(), 0.5);
    }
}
