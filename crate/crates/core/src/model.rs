//! The reward head: L1-penalized logistic regression fit by proximal
//! gradient descent, with stratified cross-validated penalty selection.
//!
//! The objective is
//!
//! ```text
//! F(w, b) = (1/n) Σᵢ [softplus(zᵢ) − yᵢ·zᵢ] + λ‖w‖₁,   z = Xw + b
//! ```
//!
//! with the bias left unpenalized. The solver is accelerated proximal
//! gradient (FISTA) with backtracking, made monotone by only accepting
//! iterates that do not increase `F` and restarting the momentum otherwise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::Design;
use crate::encoders::EncodedRow;
use crate::io::{read_json, write_json, ArtifactError};
use crate::metrics;

pub const MODEL_FORMAT: &str = "referral-forge/model/1";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("{rows} feature rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("features contain non-finite values")]
    NonFinite,
    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("model format {found:?} is not supported (expected {expected:?})")]
    FormatVersion { found: String, expected: String },
    #[error("penalty must be finite and non-negative, got {0}")]
    InvalidPenalty(f64),
    #[error("the lambda grid is empty")]
    EmptyGrid,
    #[error("cross-validation needs k >= 2 folds, got {0}")]
    InvalidFolds(usize),
    #[error("every cross-validation fold was skipped")]
    NoUsableFolds,
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub format: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub encoder_id: String,
    pub encoder_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop once the largest KKT violation falls below this.
    pub kkt_tol: f64,
    /// Stop when the objective has not moved by more than this (relative)
    /// for `STALL_WINDOW` consecutive iterations.
    pub objective_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 10_000,
            kkt_tol: 1e-8,
            objective_tol: 1e-14,
        }
    }
}

const STALL_WINDOW: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    /// Objective of the accepted iterate after each iteration (index 0 is
    /// the starting point).
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct L1Fit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub trace: FitTrace,
}

impl L1Fit {
    pub fn into_model(self, encoder_id: impl Into<String>, encoder_version: impl Into<String>) -> LogisticModel {
        LogisticModel {
            format: MODEL_FORMAT.to_string(),
            weights: self.weights,
            bias: self.bias,
            lambda: self.lambda,
            encoder_id: encoder_id.into(),
            encoder_version: encoder_version.into(),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn targets(y: &[bool]) -> Vec<f64> {
    y.iter().map(|&b| f64::from(u8::from(b))).collect()
}

fn check_inputs(x: &Design, y: &[bool]) -> Result<(), ModelError> {
    if x.n_rows() != y.len() {
        return Err(ModelError::LengthMismatch {
            rows: x.n_rows(),
            labels: y.len(),
        });
    }
    if y.len() < 2 {
        return Err(ModelError::TooFewSamples(y.len()));
    }
    if y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
        return Err(ModelError::SingleClass);
    }
    if !x.all_finite() {
        return Err(ModelError::NonFinite);
    }
    Ok(())
}

/// Smooth part of the objective: mean logistic loss.
struct Smooth<'a> {
    x: &'a Design,
    t: Vec<f64>,
    z: Vec<f64>,
}

impl<'a> Smooth<'a> {
    fn new(x: &'a Design, y: &[bool]) -> Self {
        Smooth {
            x,
            t: targets(y),
            z: vec![0.0; y.len()],
        }
    }

    fn n(&self) -> f64 {
        self.t.len() as f64
    }

    fn loss(&mut self, w: &[f64], b: f64) -> f64 {
        self.x.matvec(w, &mut self.z);
        let s: f64 = self
            .z
            .iter()
            .zip(&self.t)
            .map(|(&z, &t)| softplus(z + b) - t * (z + b))
            .sum();
        s / self.n()
    }

    /// Loss and gradient at `(w, b)`; `gw` receives the weight gradient.
    fn loss_grad(&mut self, w: &[f64], b: f64, gw: &mut [f64]) -> (f64, f64) {
        self.x.matvec(w, &mut self.z);
        let n = self.n();
        let mut loss = 0.0;
        let mut gb = 0.0;
        let mut resid = vec![0.0; self.t.len()];
        for ((r, &z), &t) in resid.iter_mut().zip(&self.z).zip(&self.t) {
            let zb = z + b;
            loss += softplus(zb) - t * zb;
            *r = (sigmoid(zb) - t) / n;
            gb += *r;
        }
        self.x.t_matvec(&resid, gw);
        (loss / n, gb)
    }
}

fn l1(w: &[f64]) -> f64 {
    w.iter().map(|v| v.abs()).sum()
}

fn soft_threshold(v: f64, thr: f64) -> f64 {
    if v > thr {
        v - thr
    } else if v < -thr {
        v + thr
    } else {
        0.0
    }
}

/// Mean logistic loss and its gradient `(∂/∂w, ∂/∂b)`, unpenalized.
pub fn loss_and_gradient(x: &Design, y: &[bool], w: &[f64], b: f64) -> (f64, Vec<f64>, f64) {
    let mut s = Smooth::new(x, y);
    let mut gw = vec![0.0; w.len()];
    let (loss, gb) = s.loss_grad(w, b, &mut gw);
    (loss, gw, gb)
}

/// Penalized objective `F(w, b)`.
pub fn objective(x: &Design, y: &[bool], w: &[f64], b: f64, lambda: f64) -> f64 {
    Smooth::new(x, y).loss(w, b) + lambda * l1(w)
}

fn kkt_from_grad(w: &[f64], gw: &[f64], gb: f64, lambda: f64) -> f64 {
    let mut worst = gb.abs();
    for (&wj, &gj) in w.iter().zip(gw) {
        let v = if wj == 0.0 {
            (gj.abs() - lambda).max(0.0)
        } else {
            (gj + lambda * wj.signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Largest violation of the L1 subgradient optimality conditions.
pub fn kkt_violation(x: &Design, y: &[bool], w: &[f64], b: f64, lambda: f64) -> f64 {
    let (_, gw, gb) = loss_and_gradient(x, y, w, b);
    kkt_from_grad(w, &gw, gb, lambda)
}

/// Smallest penalty at which every weight is zero.
pub fn critical_lambda(x: &Design, y: &[bool]) -> f64 {
    let t = targets(y);
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let r: Vec<f64> = t.iter().map(|v| (mean - v) / t.len() as f64).collect();
    let mut g = vec![0.0; x.n_cols()];
    x.t_matvec(&r, &mut g);
    g.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Logarithmically spaced penalties from 1e-4·λ_crit to 1e1·λ_crit.
pub fn default_grid(x: &Design, y: &[bool], points: usize) -> Vec<f64> {
    let lmax = critical_lambda(x, y).max(1e-12);
    let points = points.max(1);
    (0..points)
        .map(|i| {
            let frac = if points == 1 {
                1.0
            } else {
                i as f64 / (points - 1) as f64
            };
            lmax * 10f64.powf(-4.0 + 5.0 * frac)
        })
        .collect()
}

pub fn train_l1(x: &Design, y: &[bool], lambda: f64, opts: &FitOptions) -> Result<L1Fit, ModelError> {
    train_l1_from(x, y, lambda, opts, None)
}

/// As [`train_l1`], starting from `start` instead of the zero-weight,
/// base-rate-bias point.
pub fn train_l1_from(
    x: &Design,
    y: &[bool],
    lambda: f64,
    opts: &FitOptions,
    start: Option<(&[f64], f64)>,
) -> Result<L1Fit, ModelError> {
    check_inputs(x, y)?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(ModelError::InvalidPenalty(lambda));
    }
    let p = x.n_cols();
    let base = y.iter().filter(|&&b| b).count() as f64 / y.len() as f64;
    let (mut w, mut b) = match start {
        Some((w0, b0)) if w0.len() == p => (w0.to_vec(), b0),
        _ => (vec![0.0; p], logit(base)),
    };

    let mut smooth = Smooth::new(x, y);
    let mut f_x = smooth.loss(&w, b) + lambda * l1(&w);
    let mut trace = FitTrace {
        objective: vec![f_x],
        iterations: 0,
        converged: false,
        kkt_violation: f64::INFINITY,
    };

    // Momentum point, previous accepted iterate and scratch buffers.
    let (mut yw, mut yb) = (w.clone(), b);
    let mut prev_w = w.clone();
    let mut prev_b: f64;
    let mut gw = vec![0.0; p];
    let mut zw = vec![0.0; p];
    let mut momentum = 1.0f64;
    let mut step = 1.0f64;
    let mut stall = 0usize;

    for it in 1..=opts.max_iter {
        let (f_y, gb) = smooth.loss_grad(&yw, yb, &mut gw);

        // Convergence is judged at the accepted iterate; when the momentum
        // point coincides with it the gradient we just computed is exact.
        if yw == w && yb == b {
            let v = kkt_from_grad(&w, &gw, gb, lambda);
            trace.kkt_violation = v;
            if v <= opts.kkt_tol {
                trace.converged = true;
                break;
            }
        }

        step *= 1.5;
        let (f_z, zb) = loop {
            for j in 0..p {
                zw[j] = soft_threshold(yw[j] - step * gw[j], step * lambda);
            }
            let zb = yb - step * gb;
            let f_z = smooth.loss(&zw, zb);
            let mut lin = (zb - yb) * gb;
            let mut quad = (zb - yb) * (zb - yb);
            for j in 0..p {
                let d = zw[j] - yw[j];
                lin += d * gw[j];
                quad += d * d;
            }
            let bound = f_y + lin + quad / (2.0 * step);
            if f_z <= bound + 1e-12 * f_y.abs().max(1.0) || step < 1e-20 {
                break (f_z, zb);
            }
            step *= 0.5;
        };
        let big_f_z = f_z + lambda * l1(&zw);
        trace.iterations = it;

        if big_f_z <= f_x {
            prev_w.copy_from_slice(&w);
            prev_b = b;
            w.copy_from_slice(&zw);
            b = zb;
            let rel = (f_x - big_f_z) / f_x.abs().max(1.0);
            f_x = big_f_z;
            let next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
            let beta = (momentum - 1.0) / next;
            for j in 0..p {
                yw[j] = w[j] + beta * (w[j] - prev_w[j]);
            }
            yb = b + beta * (b - prev_b);
            momentum = next;
            stall = if rel <= opts.objective_tol { stall + 1 } else { 0 };
        } else {
            // Restart: the next step is a plain proximal step from `w`.
            yw.copy_from_slice(&w);
            yb = b;
            momentum = 1.0;
            stall += 1;
        }
        trace.objective.push(f_x);
        if stall >= STALL_WINDOW {
            trace.kkt_violation = kkt_violation(x, y, &w, b, lambda);
            trace.converged = trace.kkt_violation <= opts.kkt_tol.max(1e-6);
            break;
        }
    }
    if !trace.converged && trace.kkt_violation.is_infinite() {
        trace.kkt_violation = kkt_violation(x, y, &w, b, lambda);
    }
    if !trace.converged {
        log::warn!(
            "L1 logistic fit (lambda={lambda:e}) stopped after {} iterations with KKT violation {:e}",
            trace.iterations,
            trace.kkt_violation
        );
    }
    Ok(L1Fit {
        weights: w,
        bias: b,
        lambda,
        trace,
    })
}

impl LogisticModel {
    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    pub fn logit_of(&self, row: &EncodedRow) -> Result<f64, ModelError> {
        if row.dim() != self.weights.len() {
            return Err(ModelError::DimensionMismatch {
                expected: self.weights.len(),
                got: row.dim(),
            });
        }
        Ok(row.dot(&self.weights) + self.bias)
    }

    pub fn predict_logit(&self, x: &[f64]) -> Result<f64, ModelError> {
        if x.len() != self.weights.len() {
            return Err(ModelError::DimensionMismatch {
                expected: self.weights.len(),
                got: x.len(),
            });
        }
        Ok(x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.predict_logit(x).map(sigmoid)
    }

    pub fn predict_row(&self, row: &EncodedRow) -> Result<f64, ModelError> {
        self.logit_of(row).map(sigmoid)
    }

    pub fn predict_design(&self, x: &Design) -> Result<Vec<f64>, ModelError> {
        if x.n_cols() != self.weights.len() {
            return Err(ModelError::DimensionMismatch {
                expected: self.weights.len(),
                got: x.n_cols(),
            });
        }
        let mut z = vec![0.0; x.n_rows()];
        x.matvec(&self.weights, &mut z);
        Ok(z.into_iter().map(|v| sigmoid(v + self.bias)).collect())
    }

    pub fn nonzero_weights(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(write_json(path, self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let model: LogisticModel = read_json(path)?;
        if model.format != MODEL_FORMAT {
            return Err(ModelError::FormatVersion {
                found: model.format,
                expected: MODEL_FORMAT.to_string(),
            });
        }
        if model.weights.iter().any(|w| !w.is_finite()) || !model.bias.is_finite() {
            return Err(ModelError::Artifact(ArtifactError::Invalid {
                path: path.to_path_buf(),
                message: "non-finite model parameters".into(),
            }));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub grid: Vec<f64>,
    pub k: usize,
    pub seed: u64,
    /// `fold_auroc[g][f]`: validation AUROC of grid point `g` on fold `f`,
    /// `None` when the fold was skipped.
    pub fold_auroc: Vec<Vec<Option<f64>>>,
    pub mean_auroc: Vec<f64>,
    pub selected_index: usize,
    pub selected_lambda: f64,
    pub skipped_folds: Vec<usize>,
}

/// Stratified fold id per sample: each class is shuffled under `seed` and
/// dealt round-robin, continuing the deal across classes.
pub fn stratified_folds(y: &[bool], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
    let mut neg: Vec<usize> = (0..y.len()).filter(|&i| !y[i]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut fold = vec![0; y.len()];
    for (slot, &i) in pos.iter().chain(neg.iter()).enumerate() {
        fold[i] = slot % k;
    }
    fold
}

pub fn grid_search_cv(
    x: &Design,
    y: &[bool],
    grid: &[f64],
    k: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<CvReport, ModelError> {
    check_inputs(x, y)?;
    if grid.is_empty() {
        return Err(ModelError::EmptyGrid);
    }
    if k < 2 {
        return Err(ModelError::InvalidFolds(k));
    }
    if let Some(&bad) = grid.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(ModelError::InvalidPenalty(bad));
    }
    let folds = stratified_folds(y, k, seed);

    // Distinct penalties, largest first, so each fit warm-starts from a
    // sparser neighbour. Duplicated grid entries share one fit.
    let mut path: Vec<f64> = grid.to_vec();
    path.sort_by(|a, b| b.total_cmp(a));
    path.dedup();

    let per_fold: Vec<Option<Vec<f64>>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..y.len()).filter(|&i| folds[i] != f).collect();
            let val: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == f).collect();
            let ytr: Vec<bool> = train.iter().map(|&i| y[i]).collect();
            let yva: Vec<bool> = val.iter().map(|&i| y[i]).collect();
            let single = |v: &[bool]| v.iter().all(|&b| b) || v.iter().all(|&b| !b);
            if val.is_empty() || single(&ytr) || single(&yva) {
                log::warn!("cross-validation fold {f} has a single class; skipped");
                return None;
            }
            let xtr = x.select_rows(&train);
            let xva = x.select_rows(&val);
            let mut start: Option<(Vec<f64>, f64)> = None;
            let mut scores = Vec::with_capacity(path.len());
            for &lambda in &path {
                let fit = train_l1_from(
                    &xtr,
                    &ytr,
                    lambda,
                    opts,
                    start.as_ref().map(|(w, b)| (w.as_slice(), *b)),
                )
                .ok()?;
                let model = LogisticModel {
                    format: MODEL_FORMAT.into(),
                    weights: fit.weights.clone(),
                    bias: fit.bias,
                    lambda,
                    encoder_id: String::new(),
                    encoder_version: String::new(),
                };
                let p = model.predict_design(&xva).ok()?;
                scores.push(metrics::auroc(&p, &yva).ok()?);
                start = Some((fit.weights, fit.bias));
            }
            Some(scores)
        })
        .collect();

    let skipped_folds: Vec<usize> = (0..k).filter(|&f| per_fold[f].is_none()).collect();
    if skipped_folds.len() == k {
        return Err(ModelError::NoUsableFolds);
    }
    let fold_auroc: Vec<Vec<Option<f64>>> = grid
        .iter()
        .map(|l| {
            let pi = path.iter().position(|p| p == l).expect("grid value on path");
            per_fold.iter().map(|s| s.as_ref().map(|v| v[pi])).collect()
        })
        .collect();
    let mean_auroc: Vec<f64> = fold_auroc
        .iter()
        .map(|row| {
            let vals: Vec<f64> = row.iter().flatten().copied().collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    let mut selected_index = 0;
    for g in 1..grid.len() {
        let (m, best) = (mean_auroc[g], mean_auroc[selected_index]);
        if m > best || (m == best && grid[g] > grid[selected_index]) {
            selected_index = g;
        }
    }
    Ok(CvReport {
        grid: grid.to_vec(),
        k,
        seed,
        fold_auroc,
        mean_auroc,
        selected_lambda: grid[selected_index],
        selected_index,
        skipped_folds,
    })
}
