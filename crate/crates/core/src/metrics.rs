//! Classification metrics, percentile-bootstrap intervals, the random
//! baseline, calibration bins and predicted-probability summaries.

use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{write_json, write_text, ArtifactError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("metric needs both classes present")]
    SingleClass,
    #[error("no samples")]
    Empty,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Area under the ROC curve via the midrank (Mann-Whitney) formulation:
/// the probability that a random positive outscores a random negative,
/// ties counted one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; tied groups share the mean of their ranks. Work in
    // doubled ranks so every quantity stays an exact integer.
    let mut pos_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let doubled_mid = (i + 1 + j) as u128; // 2 × mean of ranks i+1..=j
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        pos_rank_sum2 += doubled_mid * pos_in_group;
        i = j;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    let u2 = pos_rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Confusion {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl ThresholdMetrics {
    fn from_confusion(c: &Confusion) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        ThresholdMetrics {
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

/// Accuracy, precision, recall and F1 with `score >= threshold` predicted
/// positive. Zero predicted positives give precision 0.
pub fn threshold_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ThresholdMetrics, MetricsError> {
    check_lengths(scores, labels)?;
    let c = Confusion::at(scores, labels, threshold);
    if c.tp + c.fp == 0 {
        log::warn!("no predicted positives at threshold {threshold}; precision set to 0");
    }
    Ok(ThresholdMetrics::from_confusion(&c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auroc,
    Accuracy,
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Auroc,
        Metric::Accuracy,
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
    ];

    pub fn compute(self, scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64, MetricsError> {
        if self == Metric::Auroc {
            return auroc(scores, labels);
        }
        check_lengths(scores, labels)?;
        let m = ThresholdMetrics::from_confusion(&Confusion::at(scores, labels, threshold));
        Ok(match self {
            Metric::Accuracy => m.accuracy,
            Metric::Precision => m.precision,
            Metric::Recall => m.recall,
            _ => m.f1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub alpha: f64,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 1000,
            alpha: 0.05,
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl BootstrapConfig {
    fn validate(&self) -> Result<(), MetricsError> {
        if self.resamples < 100 {
            return Err(MetricsError::InvalidArgument(format!(
                "need at least 100 resamples, got {}",
                self.resamples
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(MetricsError::InvalidArgument(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Linear interpolation between order statistics of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Metric values over `cfg.resamples` bootstrap resamples, one row per
/// resample and one column per entry of `metrics`. Resample `r` draws from
/// ChaCha stream `r` under `cfg.seed`, so results do not depend on thread
/// scheduling. When the data hold both classes, single-class resamples are
/// redrawn.
pub fn bootstrap_samples(
    scores: &[f64],
    labels: &[bool],
    metrics: &[Metric],
    cfg: &BootstrapConfig,
) -> Result<Vec<Vec<f64>>, MetricsError> {
    check_lengths(scores, labels)?;
    cfg.validate()?;
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let both = n_pos > 0 && n_pos < n;
    if !both && metrics.contains(&Metric::Auroc) {
        return Err(MetricsError::SingleClass);
    }
    (0..cfg.resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r as u64);
            let mut s = vec![0.0; n];
            let mut l = vec![false; n];
            loop {
                for k in 0..n {
                    let i = rng.random_range(0..n);
                    s[k] = scores[i];
                    l[k] = labels[i];
                }
                let pos = l.iter().filter(|&&v| v).count();
                if !both || (pos > 0 && pos < n) {
                    break;
                }
            }
            metrics.iter().map(|m| m.compute(&s, &l, cfg.threshold)).collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

fn interval_from(mut values: Vec<f64>, alpha: f64) -> Interval {
    values.sort_by(f64::total_cmp);
    Interval {
        low: percentile_sorted(&values, alpha / 2.0),
        high: percentile_sorted(&values, 1.0 - alpha / 2.0),
    }
}

/// Percentile bootstrap interval at levels `alpha/2` and `1 − alpha/2`.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[bool],
    metric: Metric,
    cfg: &BootstrapConfig,
) -> Result<Interval, MetricsError> {
    let samples = bootstrap_samples(scores, labels, &[metric], cfg)?;
    Ok(interval_from(samples.into_iter().map(|r| r[0]).collect(), cfg.alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub low: f64,
    pub high: f64,
}

impl MetricValue {
    /// Point estimate with its interval widened, if needed, to contain it.
    pub fn new(value: f64, ci: Interval) -> Self {
        MetricValue {
            value,
            low: ci.low.min(value),
            high: ci.high.max(value),
        }
    }

    pub fn exact(value: f64) -> Self {
        MetricValue {
            value,
            low: value,
            high: value,
        }
    }

    /// `0.681 (0.662–0.699)`
    pub fn render(&self) -> String {
        format!("{:.3} ({:.3}–{:.3})", self.value, self.low, self.high)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub n: usize,
    pub auroc: MetricValue,
    /// True when AUROC is the fixed 0.5 of a label-independent predictor.
    pub auroc_by_convention: bool,
    pub accuracy: MetricValue,
    pub precision: MetricValue,
    pub recall: MetricValue,
    pub f1: MetricValue,
}

impl MetricReport {
    /// One table row: model, AUROC, accuracy, precision, recall, F1.
    pub fn table_row(&self) -> Vec<String> {
        let auroc = if self.auroc_by_convention {
            format!("{:.3}", self.auroc.value)
        } else {
            self.auroc.render()
        };
        vec![
            self.model.clone(),
            auroc,
            self.accuracy.render(),
            self.precision.render(),
            self.recall.render(),
            self.f1.render(),
        ]
    }
}

fn report_from(
    model: &str,
    scores: &[f64],
    labels: &[bool],
    metrics: &[Metric],
    cfg: &BootstrapConfig,
) -> Result<IndexMap<Metric, MetricValue>, MetricsError> {
    let samples = bootstrap_samples(scores, labels, metrics, cfg)?;
    let mut out = IndexMap::new();
    for (j, &m) in metrics.iter().enumerate() {
        let value = m.compute(scores, labels, cfg.threshold)?;
        let ci = interval_from(samples.iter().map(|r| r[j]).collect(), cfg.alpha);
        out.insert(m, MetricValue::new(value, ci));
    }
    log::debug!("{model}: bootstrap over {} resamples done", cfg.resamples);
    Ok(out)
}

/// All five metrics with bootstrap intervals. Each interval equals what
/// [`bootstrap_ci`] returns for that metric under the same config.
pub fn evaluate(
    model: &str,
    scores: &[f64],
    labels: &[bool],
    cfg: &BootstrapConfig,
) -> Result<MetricReport, MetricsError> {
    let c = Confusion::at(scores, labels, cfg.threshold);
    if c.tp + c.fp == 0 {
        log::warn!(
            "{model}: no predicted positives at threshold {}; precision set to 0",
            cfg.threshold
        );
    }
    let m = report_from(model, scores, labels, &Metric::ALL, cfg)?;
    Ok(MetricReport {
        model: model.to_string(),
        n: scores.len(),
        auroc: m[&Metric::Auroc],
        auroc_by_convention: false,
        accuracy: m[&Metric::Accuracy],
        precision: m[&Metric::Precision],
        recall: m[&Metric::Recall],
        f1: m[&Metric::F1],
    })
}

/// Metrics of Bernoulli(`rate`) predictions drawn under `seed`; AUROC is
/// fixed at 0.5.
pub fn random_baseline(
    labels: &[bool],
    rate: f64,
    seed: u64,
    cfg: &BootstrapConfig,
) -> Result<MetricReport, MetricsError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(MetricsError::InvalidArgument(format!(
            "rate must lie in [0, 1], got {rate}"
        )));
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let preds: Vec<f64> = labels
        .iter()
        .map(|_| f64::from(u8::from(rng.random::<f64>() < rate)))
        .collect();
    let cfg = BootstrapConfig { threshold: 0.5, ..*cfg };
    let metrics = [Metric::Accuracy, Metric::Precision, Metric::Recall, Metric::F1];
    let m = report_from("Random Baseline", &preds, labels, &metrics, &cfg)?;
    Ok(MetricReport {
        model: "Random Baseline".to_string(),
        n: labels.len(),
        auroc: MetricValue::exact(0.5),
        auroc_by_convention: true,
        accuracy: m[&Metric::Accuracy],
        precision: m[&Metric::Precision],
        recall: m[&Metric::Recall],
        f1: m[&Metric::F1],
    })
}

/// The `metrics_report.json` document: one row per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub bootstrap: BootstrapConfig,
    pub rows: Vec<MetricReport>,
    pub rendered: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn new(bootstrap: BootstrapConfig, rows: Vec<MetricReport>) -> Self {
        let rendered = rows.iter().map(MetricReport::table_row).collect();
        MetricsTable {
            columns: ["Model", "AUROC", "Accuracy", "Precision", "Recall", "F1-Score"]
                .map(String::from)
                .to_vec(),
            bootstrap,
            rows,
            rendered,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        write_json(path, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_p: f64,
    pub share: f64,
    pub count: usize,
    pub min_p: f64,
    pub max_p: f64,
}

impl CalibrationBin {
    /// Binomial standard error of the share under the bin's mean p.
    pub fn standard_error(&self) -> f64 {
        (self.mean_p * (1.0 - self.mean_p) / self.count as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub requested_bins: usize,
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationCurve {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin", "mean_p", "share", "count", "min_p", "max_p", "se"])
            .expect("in-memory write");
        for (i, b) in self.bins.iter().enumerate() {
            w.write_record([
                i.to_string(),
                b.mean_p.to_string(),
                b.share.to_string(),
                b.count.to_string(),
                b.min_p.to_string(),
                b.max_p.to_string(),
                b.standard_error().to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), ArtifactError> {
        write_text(path, &self.to_csv())
    }
}

/// Quantile bins over predicted p. Bin edges fall at multiples of `N/n_bins`
/// in sorted order, moved forward so equal probabilities share a bin; bins
/// emptied by that move are merged away with a warning.
pub fn calibration_bins(probs: &[f64], labels: &[bool], n_bins: usize) -> Result<CalibrationCurve, MetricsError> {
    check_lengths(probs, labels)?;
    if n_bins < 2 {
        return Err(MetricsError::InvalidArgument(format!(
            "need at least 2 bins, got {n_bins}"
        )));
    }
    let n = probs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(a.cmp(&b)));
    let mut bins = Vec::with_capacity(n_bins);
    let mut start = 0;
    for b in 1..=n_bins {
        let mut end = ((b * n) as f64 / n_bins as f64).round() as usize;
        end = end.max(start);
        while end > start && end < n && probs[order[end]] == probs[order[end - 1]] {
            end += 1;
        }
        if b == n_bins {
            end = n;
        }
        if end > start {
            let idx = &order[start..end];
            let count = idx.len();
            bins.push(CalibrationBin {
                mean_p: idx.iter().map(|&i| probs[i]).sum::<f64>() / count as f64,
                share: idx.iter().filter(|&&i| labels[i]).count() as f64 / count as f64,
                count,
                min_p: probs[idx[0]],
                max_p: probs[idx[count - 1]],
            });
        }
        start = end;
    }
    if bins.len() < n_bins {
        log::warn!(
            "calibration: merged tied probabilities into {} of {n_bins} bins",
            bins.len()
        );
    }
    Ok(CalibrationCurve {
        requested_bins: n_bins,
        bins,
    })
}

pub const REPORTED_PERCENTILES: [u32; 9] = [1, 5, 10, 25, 50, 75, 90, 95, 99];

/// The `prob_stats.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub mean: f64,
    pub std_dev: f64,
    pub minimum: f64,
    pub maximum: f64,
    pub count: usize,
    /// Keyed by percentile level, e.g. `"50"`.
    pub percentiles: IndexMap<String, f64>,
}

impl DistributionStats {
    pub fn percentile(&self, level: u32) -> Option<f64> {
        self.percentiles.get(&level.to_string()).copied()
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        write_json(path, self)
    }
}

pub fn distribution_stats(probs: &[f64]) -> Result<DistributionStats, MetricsError> {
    if probs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = probs.len();
    let mut sorted = probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = probs.iter().sum::<f64>() / n as f64;
    let std_dev = if n > 1 {
        (probs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let percentiles = REPORTED_PERCENTILES
        .iter()
        .map(|&q| (q.to_string(), percentile_sorted(&sorted, f64::from(q) / 100.0)))
        .collect();
    Ok(DistributionStats {
        mean,
        std_dev,
        minimum: sorted[0],
        maximum: sorted[n - 1],
        count: n,
        percentiles,
    })
}
