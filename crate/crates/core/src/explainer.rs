//! Integrated-Gradients attributions over the reward head, aggregated to
//! sentence shares and turned into strong/weak/moderate ratings.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{EmbedError, EmbeddingProvider, Encoder, TokenSpan};
use crate::io::{read_json, write_json, ArtifactError};
use crate::metrics::percentile_sorted;
use crate::model::sigmoid;
use crate::ratings::{Rating, RatingSummary, SentenceRating};
use crate::reward::{RewardError, RewardModel};
use crate::text::{request_text, tokenize};

pub const POLICY_FORMAT: &str = "referral-forge/rating-policy/1";
pub const DEFAULT_IG_STEPS: usize = 64;
pub const MIN_CALIBRATION_SAMPLES: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("token matrix is {x:?} but baseline is {baseline:?}")]
    ShapeMismatch {
        x: (usize, usize),
        baseline: (usize, usize),
    },
    #[error("integrated gradients needs at least one step")]
    ZeroSteps,
    #[error("scorer produced a non-finite gradient")]
    NonFiniteGradient,
    #[error("policy calibration needs at least {min} requests, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("training probabilities are too concentrated to separate weak from strong")]
    DegeneratePolicy,
    #[error("policy format {0:?} is not supported")]
    PolicyFormat(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

/// A title or body sentence. Token offsets index the token sequence the
/// attributions were computed over; byte offsets index `title + "\n" + body`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
    pub byte_start: usize,
    pub byte_end: usize,
    pub is_title: bool,
    pub text: String,
}

impl SentenceSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Byte ranges of the title and of each body sentence in
/// `request_text(title, body)`. Ranges are contiguous and cover the text.
fn sentence_ranges(title: &str, body: &str) -> Vec<(usize, usize, bool)> {
    let offset = title.len() + 1;
    let mut out = vec![(0, offset, true)];
    let bytes = body.as_bytes();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let boundary = match c {
            b'!' | b'?' | b'\n' => true,
            // A period between two alphanumerics ("3.5", "e.g") does not end a sentence.
            b'.' => {
                let prev = i > 0 && bytes[i - 1].is_ascii_alphanumeric();
                let next = bytes.get(i + 1).is_some_and(|b| b.is_ascii_alphanumeric());
                !(prev && next)
            }
            _ => false,
        };
        i += 1;
        if boundary {
            // Runs like "?!" or "..." stay with the sentence they close.
            while i < bytes.len() && matches!(bytes[i], b'.' | b'!' | b'?') {
                i += 1;
            }
            out.push((offset + start, offset + i, false));
            start = i;
        }
    }
    if start < bytes.len() {
        out.push((offset + start, offset + bytes.len(), false));
    }
    out
}

/// Assigns tokens (by start byte) to sentences. Body sentences without
/// tokens are dropped; the title span is always kept.
pub fn segment_tokens(title: &str, body: &str, tokens: &[TokenSpan]) -> Vec<SentenceSpan> {
    let text = request_text(title, body);
    let mut spans = Vec::new();
    let mut t = 0;
    for (b0, b1, is_title) in sentence_ranges(title, body) {
        let start = t;
        while t < tokens.len() && tokens[t].start < b1 {
            t += 1;
        }
        if is_title || t > start {
            spans.push(SentenceSpan {
                start,
                end: t,
                byte_start: b0,
                byte_end: b1,
                is_title,
                text: text[b0..b1].trim().to_string(),
            });
        }
    }
    // Tokens past the end (only possible with foreign offsets) join the last span.
    if t < tokens.len() {
        if let Some(last) = spans.last_mut() {
            last.end = tokens.len();
        }
    }
    spans
}

/// Segments a request using the shared tokenizer.
pub fn segment(title: &str, body: &str) -> Vec<SentenceSpan> {
    let text = request_text(title, body);
    let tokens: Vec<TokenSpan> = tokenize(&text)
        .into_iter()
        .map(|t| TokenSpan {
            text: t.text.to_string(),
            start: t.start,
            end: t.end,
        })
        .collect();
    segment_tokens(title, body, &tokens)
}

/// A scalar score of a token-representation matrix with an analytic
/// gradient.
pub trait DifferentiableScorer: Send + Sync {
    fn logit(&self, x: ArrayView2<'_, f64>) -> f64;
    fn gradient(&self, x: ArrayView2<'_, f64>) -> Array2<f64>;
}

/// The reward head over mean-pooled token rows: `w · mean(x) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPoolLinearScorer {
    pub weights: Array1<f64>,
    pub bias: f64,
}

impl MeanPoolLinearScorer {
    pub fn new(weights: &[f64], bias: f64) -> Self {
        MeanPoolLinearScorer {
            weights: Array1::from(weights.to_vec()),
            bias,
        }
    }
}

impl DifferentiableScorer for MeanPoolLinearScorer {
    fn logit(&self, x: ArrayView2<'_, f64>) -> f64 {
        match x.mean_axis(Axis(0)) {
            Some(m) => m.dot(&self.weights) + self.bias,
            None => self.bias,
        }
    }

    fn gradient(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let t = x.nrows();
        let mut g = Array2::zeros(x.raw_dim());
        if t > 0 {
            let row = &self.weights / t as f64;
            for mut r in g.rows_mut() {
                r.assign(&row);
            }
        }
        g
    }
}

/// Midpoint Riemann approximation of Integrated Gradients from `baseline`
/// to `x` with `steps` intervals. Entry `(t, d)` is the attribution of
/// token `t`, dimension `d`.
pub fn integrated_gradients(
    scorer: &dyn DifferentiableScorer,
    x: ArrayView2<'_, f64>,
    baseline: ArrayView2<'_, f64>,
    steps: usize,
) -> Result<Array2<f64>, ExplainError> {
    if x.shape() != baseline.shape() {
        return Err(ExplainError::ShapeMismatch {
            x: x.dim(),
            baseline: baseline.dim(),
        });
    }
    if steps == 0 {
        return Err(ExplainError::ZeroSteps);
    }
    let diff = &x - &baseline;
    let mut acc = Array2::<f64>::zeros(x.raw_dim());
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        let point = &baseline + &(&diff * alpha);
        let g = scorer.gradient(point.view());
        if g.iter().any(|v| !v.is_finite()) {
            return Err(ExplainError::NonFiniteGradient);
        }
        acc += &g;
    }
    Ok(diff * acc / steps as f64)
}

/// `Σ attributions − (logit(x) − logit(baseline))`.
pub fn completeness_residual(
    scorer: &dyn DifferentiableScorer,
    x: ArrayView2<'_, f64>,
    baseline: ArrayView2<'_, f64>,
    attributions: &Array2<f64>,
) -> f64 {
    attributions.sum() - (scorer.logit(x) - scorer.logit(baseline))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareStatus {
    Normal,
    /// Total attribution was zero; shares are all zero.
    ZeroTotal,
    /// Total attribution was negative; shares are raw / Σ|raw|.
    NegativeTotal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceShares {
    pub raw: Vec<f64>,
    pub shares: Vec<f64>,
    pub total: f64,
    pub status: ShareStatus,
}

/// Normalizes per-span raw attribution into shares of the total.
pub fn normalize_shares(raw: Vec<f64>) -> SentenceShares {
    let total: f64 = raw.iter().sum();
    let (shares, status) = if total > 0.0 {
        (raw.iter().map(|r| r / total).collect(), ShareStatus::Normal)
    } else if total < 0.0 {
        let abs: f64 = raw.iter().map(|r| r.abs()).sum();
        (raw.iter().map(|r| r / abs).collect(), ShareStatus::NegativeTotal)
    } else {
        (vec![0.0; raw.len()], ShareStatus::ZeroTotal)
    };
    SentenceShares {
        raw,
        shares,
        total,
        status,
    }
}

/// Per-token scores (summed over dimensions) and per-span shares.
pub fn sentence_attributions(attributions: &Array2<f64>, spans: &[SentenceSpan]) -> (Vec<f64>, SentenceShares) {
    let token_scores: Vec<f64> = attributions.rows().into_iter().map(|r| r.sum()).collect();
    let raw = spans
        .iter()
        .map(|s| token_scores[s.start..s.end].iter().sum())
        .collect();
    (token_scores, normalize_shares(raw))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TitleBucket {
    /// Inclusive token-length range.
    pub min_len: usize,
    pub max_len: usize,
    /// Sorted title shares of calibration requests in this bucket.
    pub shares: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingPolicy {
    pub format: String,
    pub weak_max: f64,
    pub strong_min: f64,
    pub z_strong: f64,
    pub z_weak: f64,
    pub title_strong_pct: f64,
    pub title_weak_pct: f64,
    pub buckets: Vec<TitleBucket>,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySample {
    pub p: f64,
    /// Token count of the full request.
    pub length: usize,
    /// Title share, or `None` when shares were undefined.
    pub title_share: Option<f64>,
}

impl RatingPolicy {
    /// Overall thresholds at the 1/3 and 2/3 quantiles of `p`; title
    /// buckets at deciles of request length.
    pub fn calibrate(samples: &[PolicySample]) -> Result<RatingPolicy, ExplainError> {
        if samples.len() < MIN_CALIBRATION_SAMPLES {
            return Err(ExplainError::TooFewSamples {
                min: MIN_CALIBRATION_SAMPLES,
                got: samples.len(),
            });
        }
        let mut ps: Vec<f64> = samples.iter().map(|s| s.p).collect();
        ps.sort_by(f64::total_cmp);
        let weak_max = percentile_sorted(&ps, 1.0 / 3.0);
        let strong_min = percentile_sorted(&ps, 2.0 / 3.0);
        if weak_max >= strong_min {
            return Err(ExplainError::DegeneratePolicy);
        }

        let mut lengths: Vec<usize> = samples.iter().map(|s| s.length).collect();
        lengths.sort_unstable();
        let n = lengths.len();
        let mut edges: Vec<usize> = (1..=10).map(|i| lengths[(i * n).div_ceil(10) - 1]).collect();
        edges.dedup();
        let mut buckets = Vec::with_capacity(edges.len());
        let mut lo = 0;
        for (j, &hi) in edges.iter().enumerate() {
            let max_len = if j + 1 == edges.len() { usize::MAX } else { hi };
            let mut shares: Vec<f64> = samples
                .iter()
                .filter(|s| s.length >= lo && s.length <= max_len)
                .filter_map(|s| s.title_share)
                .collect();
            shares.sort_by(f64::total_cmp);
            buckets.push(TitleBucket {
                min_len: lo,
                max_len,
                shares,
            });
            lo = hi + 1;
        }
        Ok(RatingPolicy {
            format: POLICY_FORMAT.to_string(),
            weak_max,
            strong_min,
            z_strong: 1.0,
            z_weak: -1.0,
            title_strong_pct: 2.0 / 3.0,
            title_weak_pct: 1.0 / 3.0,
            buckets,
            samples: samples.len(),
        })
    }

    pub fn overall(&self, p: f64) -> Rating {
        if p <= self.weak_max {
            Rating::Weak
        } else if p >= self.strong_min {
            Rating::Strong
        } else {
            Rating::Moderate
        }
    }

    /// The bucket for `length`; if it holds no shares, the nearest bucket
    /// that does.
    pub fn bucket_for(&self, length: usize) -> Option<&TitleBucket> {
        let home = self
            .buckets
            .iter()
            .position(|b| length >= b.min_len && length <= b.max_len)?;
        if !self.buckets[home].shares.is_empty() {
            return Some(&self.buckets[home]);
        }
        let nearest = (0..self.buckets.len())
            .filter(|&j| !self.buckets[j].shares.is_empty())
            .min_by_key(|&j| (j as isize - home as isize).unsigned_abs())?;
        log::warn!("no title shares for length {length}; using bucket {nearest}");
        Some(&self.buckets[nearest])
    }

    /// Mid-rank percentile of `share` within the bucket for `length`.
    pub fn title_percentile(&self, length: usize, share: f64) -> Option<f64> {
        let b = self.bucket_for(length)?;
        let below = b.shares.iter().filter(|&&s| s < share).count() as f64;
        let equal = b.shares.iter().filter(|&&s| s == share).count() as f64;
        Some((below + 0.5 * equal) / b.shares.len() as f64)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ExplainError> {
        Ok(write_json(path, self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<RatingPolicy, ExplainError> {
        let policy: RatingPolicy = read_json(path)?;
        if policy.format != POLICY_FORMAT {
            return Err(ExplainError::PolicyFormat(policy.format));
        }
        Ok(policy)
    }
}

/// Sample standard deviation; zero below two values.
fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Ratings from p, span shares and the policy.
///
/// Body sentences are rated by the z-score of their share against the
/// uniform share, using the spread of body shares within the request, then
/// moved one step toward a strong or weak overall rating. The title is
/// rated by the percentile of its share among requests of similar length.
pub fn rate(
    p: f64,
    spans: &[SentenceSpan],
    shares: &SentenceShares,
    length: usize,
    policy: &RatingPolicy,
) -> RatingSummary {
    let overall = policy.overall(p);
    let undefined = shares.status == ShareStatus::ZeroTotal;
    let body: Vec<(usize, &SentenceSpan)> = spans.iter().enumerate().filter(|(_, s)| !s.is_title).collect();
    let body_shares: Vec<f64> = body.iter().map(|&(i, _)| shares.shares[i]).collect();
    let mean = if body_shares.is_empty() {
        0.0
    } else {
        body_shares.iter().sum::<f64>() / body_shares.len() as f64
    };
    let sd = sample_sd(&body_shares);

    let sentences = body
        .iter()
        .enumerate()
        .map(|(k, &(i, span))| {
            let rating = if undefined {
                Rating::Moderate
            } else {
                let z = if sd > 0.0 { (shares.shares[i] - mean) / sd } else { 0.0 };
                let base = if z >= policy.z_strong {
                    Rating::Strong
                } else if z <= policy.z_weak {
                    Rating::Weak
                } else {
                    Rating::Moderate
                };
                match overall {
                    Rating::Strong => base.up(),
                    Rating::Weak => base.down(),
                    Rating::Moderate => base,
                }
            };
            SentenceRating {
                index: k,
                text: span.text.clone(),
                rating,
            }
        })
        .collect();

    let title = match spans.iter().position(|s| s.is_title) {
        Some(i) if !undefined => match policy.title_percentile(length, shares.shares[i]) {
            Some(pct) if pct >= policy.title_strong_pct => Rating::Strong,
            Some(pct) if pct <= policy.title_weak_pct => Rating::Weak,
            _ => Rating::Moderate,
        },
        _ => Rating::Moderate,
    };
    RatingSummary {
        overall,
        title,
        sentences,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Ig,
    Occlusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAttribution {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// One line of `ratings.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub p: f64,
    pub method: AttributionMethod,
    pub spans: Vec<SentenceSpan>,
    /// Empty for occlusion.
    pub tokens: Vec<TokenAttribution>,
    pub raw: Vec<f64>,
    pub shares: Vec<f64>,
    pub title_share: f64,
    pub share_status: ShareStatus,
    /// `None` for occlusion.
    pub completeness_residual: Option<f64>,
    pub length: usize,
    pub ratings: RatingSummary,
}

/// Attribution plus rating, before a policy is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub p: f64,
    pub method: AttributionMethod,
    pub spans: Vec<SentenceSpan>,
    pub tokens: Vec<TokenAttribution>,
    pub shares: SentenceShares,
    pub residual: Option<f64>,
    pub length: usize,
}

impl Attribution {
    pub fn title_share(&self) -> f64 {
        self.spans
            .iter()
            .position(|s| s.is_title)
            .map_or(0.0, |i| self.shares.shares[i])
    }

    pub fn into_report(self, id: Option<String>, policy: &RatingPolicy) -> AttributionReport {
        let ratings = rate(self.p, &self.spans, &self.shares, self.length, policy);
        AttributionReport {
            id,
            p: self.p,
            method: self.method,
            title_share: self.title_share(),
            spans: self.spans,
            tokens: self.tokens,
            raw: self.shares.raw,
            shares: self.shares.shares,
            share_status: self.shares.status,
            completeness_residual: self.residual,
            length: self.length,
            ratings,
        }
    }
}

/// Attributes the reward model's prediction to the title and sentences.
pub struct Explainer {
    reward: Arc<RewardModel>,
    steps: usize,
}

impl Explainer {
    pub fn new(reward: Arc<RewardModel>, steps: usize) -> Self {
        Explainer {
            reward,
            steps: steps.max(1),
        }
    }

    /// The token-level provider when the reward model can be differentiated
    /// through it.
    fn token_provider(&self) -> Option<&Arc<dyn EmbeddingProvider>> {
        match self.reward.encoder() {
            Encoder::Embedding(p) if p.supports_tokens() => Some(p),
            _ => None,
        }
    }

    pub fn method(&self) -> AttributionMethod {
        if self.token_provider().is_some() {
            AttributionMethod::Ig
        } else {
            AttributionMethod::Occlusion
        }
    }

    pub fn attribute(&self, title: &str, body: &str) -> Result<Attribution, ExplainError> {
        let length = tokenize(&request_text(title, body)).len();
        match self.token_provider() {
            Some(provider) => self.attribute_ig(provider.as_ref(), title, body, length),
            None => self.attribute_occlusion(title, body, length),
        }
    }

    fn attribute_ig(
        &self,
        provider: &dyn EmbeddingProvider,
        title: &str,
        body: &str,
        length: usize,
    ) -> Result<Attribution, ExplainError> {
        let model = self.reward.model();
        let scorer = MeanPoolLinearScorer::new(&model.weights, model.bias);
        let te = provider.embed_tokens(&request_text(title, body))?;
        let baseline = Array2::zeros(te.matrix.raw_dim());
        let attr = integrated_gradients(&scorer, te.matrix.view(), baseline.view(), self.steps)?;
        let residual = completeness_residual(&scorer, te.matrix.view(), baseline.view(), &attr);
        let spans = segment_tokens(title, body, &te.tokens);
        let (token_scores, shares) = sentence_attributions(&attr, &spans);
        let tokens = te
            .tokens
            .into_iter()
            .zip(token_scores)
            .map(|(t, score)| TokenAttribution {
                text: t.text,
                start: t.start,
                end: t.end,
                score,
            })
            .collect();
        Ok(Attribution {
            p: sigmoid(scorer.logit(te.matrix.view())),
            method: AttributionMethod::Ig,
            spans,
            tokens,
            shares,
            residual: Some(residual),
            length,
        })
    }

    /// Leave-one-span-out: a span's raw attribution is the drop in p when
    /// it is removed.
    fn attribute_occlusion(&self, title: &str, body: &str, length: usize) -> Result<Attribution, ExplainError> {
        let spans = segment(title, body);
        let p = self.reward.score(title, body)?;
        let offset = title.len() + 1;
        let raw = spans
            .par_iter()
            .map(|s| {
                let q = if s.is_title {
                    self.reward.score("", body)?
                } else {
                    let (a, b) = (s.byte_start - offset, s.byte_end - offset);
                    let rest = format!("{}{}", &body[..a], &body[b..]);
                    self.reward.score(title, &rest)?
                };
                Ok(p - q)
            })
            .collect::<Result<Vec<f64>, ExplainError>>()?;
        Ok(Attribution {
            p,
            method: AttributionMethod::Occlusion,
            spans,
            tokens: Vec::new(),
            shares: normalize_shares(raw),
            residual: None,
            length,
        })
    }

    pub fn explain(&self, title: &str, body: &str, policy: &RatingPolicy) -> Result<AttributionReport, ExplainError> {
        Ok(self.attribute(title, body)?.into_report(None, policy))
    }

    /// Calibration samples for [`RatingPolicy::calibrate`].
    pub fn policy_samples<S: AsRef<str> + Sync>(&self, requests: &[(S, S)]) -> Result<Vec<PolicySample>, ExplainError> {
        requests
            .par_iter()
            .map(|(t, b)| {
                let a = self.attribute(t.as_ref(), b.as_ref())?;
                let title_share = (a.shares.status != ShareStatus::ZeroTotal).then(|| a.title_share());
                Ok(PolicySample {
                    p: a.p,
                    length: a.length,
                    title_share,
                })
            })
            .collect()
    }

    pub fn calibrate_policy<S: AsRef<str> + Sync>(&self, requests: &[(S, S)]) -> Result<RatingPolicy, ExplainError> {
        RatingPolicy::calibrate(&self.policy_samples(requests)?)
    }
}
