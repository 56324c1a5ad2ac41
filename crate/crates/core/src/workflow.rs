//! End-to-end revision workflows and the before/after evaluation of their
//! output: median-split summary, smoothed curve and decile shares.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Lexicon;
use crate::encoders::EmbeddingProvider;
use crate::explainer::{ExplainError, Explainer, RatingPolicy};
use crate::improver::{
    build_system_prompt, build_user_prompt, revise, CompletionProvider, PromptBundle, PromptError, PromptExample,
    PromptMode, PromptTemplates, RetryPolicy, ReviseError, ValidationIssue,
};
use crate::io::{write_json, write_jsonl, write_text, ArtifactError};
use crate::retriever::{Retriever, RetrieverError};
use crate::reward::{RewardError, RewardModel};
use crate::text::request_text;

pub const REPORT_FORMAT: &str = "referral-forge/workflow-report/1";
pub const DEFAULT_LOWESS_FRAC: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkflowMode {
    Basic,
    Rag,
    RagNoRatings,
}

impl WorkflowMode {
    pub const ALL: [WorkflowMode; 3] = [WorkflowMode::Basic, WorkflowMode::Rag, WorkflowMode::RagNoRatings];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkflowMode::Basic => "basic",
            WorkflowMode::Rag => "rag",
            WorkflowMode::RagNoRatings => "rag_no_ratings",
        }
    }

    pub fn parse(s: &str) -> Option<WorkflowMode> {
        WorkflowMode::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Row label in the comparison table.
    pub fn label(self) -> &'static str {
        match self {
            WorkflowMode::Basic => "Basic Workflow",
            WorkflowMode::Rag => "RAG Workflow",
            WorkflowMode::RagNoRatings => "Exclude Ratings",
        }
    }

    pub fn uses_retrieval(self) -> bool {
        self != WorkflowMode::Basic
    }

    pub fn includes_ratings(self) -> bool {
        self == WorkflowMode::Rag
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WorkflowError {
    #[error("workflow {0} needs a retrieval index")]
    MissingIndex(&'static str),
    #[error("workflow {0} needs an explainer and rating policy")]
    MissingPolicy(&'static str),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Revise(#[from] ReviseError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error("summaries need at least {needed} outcomes, got {got}")]
    TooFewOutcomes { needed: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

impl WorkflowError {
    pub fn kind(&self) -> &'static str {
        match self {
            WorkflowError::MissingIndex(_) => "index_missing",
            WorkflowError::MissingPolicy(_) => "policy_missing",
            WorkflowError::Prompt(_) => "prompt_rejected",
            WorkflowError::Revise(ReviseError::Transport { .. }) => "provider_unavailable",
            WorkflowError::Revise(ReviseError::ParseFailure { .. }) => "parse_failure",
            WorkflowError::Revise(ReviseError::Validation { .. }) => "validation_failure",
            WorkflowError::Reward(_) => "reward_failure",
            WorkflowError::Retriever(_) => "retrieval_failure",
            WorkflowError::Explain(_) => "explain_failure",
            WorkflowError::TooFewOutcomes { .. } | WorkflowError::InvalidArgument(_) => "invalid_argument",
            WorkflowError::Artifact(_) => "artifact_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSettings {
    pub model: String,
    pub temperature: f64,
    pub seed: Option<u64>,
    /// Examples requested from the retriever.
    pub examples: usize,
    pub retry: RetryPolicy,
}

impl Default for WorkflowSettings {
    fn default() -> Self {
        WorkflowSettings {
            model: "stub".into(),
            temperature: 0.0,
            seed: None,
            examples: 5,
            retry: RetryPolicy::default(),
        }
    }
}

/// Everything a workflow run reads. The reward model is never updated here.
pub struct WorkflowDeps<'a> {
    pub reward: &'a RewardModel,
    pub embedder: &'a dyn EmbeddingProvider,
    pub retriever: Option<&'a dyn Retriever>,
    pub explainer: Option<&'a Explainer>,
    pub policy: Option<&'a RatingPolicy>,
    pub provider: &'a dyn CompletionProvider,
    pub templates: &'a PromptTemplates,
    pub lexicon: &'a Lexicon,
    pub settings: WorkflowSettings,
}

/// A request to revise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowInput {
    pub id: String,
    pub title: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionOutcome {
    pub id: String,
    pub workflow: WorkflowMode,
    pub p_before: f64,
    pub p_after: f64,
    pub delta: f64,
    pub improved: bool,
    pub original_title: String,
    pub original_content: String,
    pub revised_title: String,
    pub revised_content: String,
    /// Retrieved example ids in prompt order.
    pub examples: Vec<String>,
    pub provider: String,
    pub attempts: usize,
}

impl RevisionOutcome {
    pub fn new(id: String, workflow: WorkflowMode, p_before: f64, p_after: f64) -> Self {
        let delta = p_after - p_before;
        RevisionOutcome {
            id,
            workflow,
            p_before,
            p_after,
            delta,
            improved: delta > 0.0,
            original_title: String::new(),
            original_content: String::new(),
            revised_title: String::new(),
            revised_content: String::new(),
            examples: Vec::new(),
            provider: String::new(),
            attempts: 0,
        }
    }
}

/// A request the workflow could not revise. Never imputed into summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedOutcome {
    pub id: String,
    pub workflow: WorkflowMode,
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub issues: Vec<ValidationIssue>,
}

impl FailedOutcome {
    fn from_error(id: &str, workflow: WorkflowMode, err: &WorkflowError) -> Self {
        let (raw, issues) = match err {
            WorkflowError::Revise(e @ ReviseError::Validation { issues, .. }) => {
                (e.raw().map(String::from), issues.clone())
            }
            WorkflowError::Revise(e) => (e.raw().map(String::from), Vec::new()),
            _ => (None, Vec::new()),
        };
        FailedOutcome {
            id: id.to_string(),
            workflow,
            kind: err.kind().to_string(),
            message: err.to_string(),
            raw,
            issues,
        }
    }
}

/// Prompt inputs for one request; also what `/revise` returns alongside
/// the revision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedPrompt {
    pub p_before: f64,
    pub bundle: PromptBundle,
}

/// Scores the request and assembles its prompt for `mode`. A retrieval
/// that finds no eligible example falls back to the basic prompt.
pub fn prepare_prompt(
    input: &WorkflowInput,
    mode: WorkflowMode,
    deps: &WorkflowDeps<'_>,
) -> Result<PreparedPrompt, WorkflowError> {
    let p_before = deps.reward.score(&input.title, &input.content)?;
    let mut examples = Vec::new();
    let mut user_ratings = None;
    if mode.uses_retrieval() {
        let retriever = deps.retriever.ok_or(WorkflowError::MissingIndex(mode.as_str()))?;
        if mode.includes_ratings() {
            let (explainer, policy) = match (deps.explainer, deps.policy) {
                (Some(e), Some(p)) => (e, p),
                _ => return Err(WorkflowError::MissingPolicy(mode.as_str())),
            };
            user_ratings = Some(explainer.explain(&input.title, &input.content, policy)?.ratings);
        }
        let embedding = deps
            .embedder
            .embed(&request_text(&input.title, &input.content))
            .map_err(RetrieverError::from)?;
        let found = retriever.retrieve(p_before, &embedding.values, deps.settings.examples)?;
        examples = found
            .examples
            .into_iter()
            .map(|e| PromptExample {
                id: e.id,
                title: e.title,
                content: e.body,
                ratings: e.ratings,
            })
            .collect();
        if examples.is_empty() {
            log::info!(
                "{}: no eligible examples above threshold {:.4}; using the basic prompt",
                input.id,
                found.threshold
            );
        }
    }
    let prompt_mode = if examples.is_empty() {
        PromptMode::Basic
    } else {
        PromptMode::Rag
    };
    let system = build_system_prompt(deps.templates, &examples, mode.includes_ratings(), prompt_mode)?;
    let user = build_user_prompt(&input.title, &input.content, user_ratings.as_ref(), deps.lexicon)?;
    let bundle = PromptBundle {
        system,
        user,
        model: deps.settings.model.clone(),
        temperature: deps.settings.temperature,
        seed: deps.settings.seed,
        examples,
        templates_version: deps.templates.version.clone(),
    };
    Ok(PreparedPrompt { p_before, bundle })
}

/// Revises one request and scores both versions with the same model.
pub fn run_workflow(
    input: &WorkflowInput,
    mode: WorkflowMode,
    deps: &WorkflowDeps<'_>,
) -> Result<RevisionOutcome, WorkflowError> {
    let prepared = prepare_prompt(input, mode, deps)?;
    let revision = revise(deps.provider, &prepared.bundle, &deps.settings.retry)?;
    let p_after = deps.reward.score(&revision.title, &revision.content)?;
    let mut out = RevisionOutcome::new(input.id.clone(), mode, prepared.p_before, p_after);
    out.original_title = input.title.clone();
    out.original_content = input.content.clone();
    out.revised_title = revision.title;
    out.revised_content = revision.content;
    out.examples = prepared.bundle.examples.into_iter().map(|e| e.id).collect();
    out.provider = revision.provider;
    out.attempts = revision.attempts;
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub outcomes: Vec<RevisionOutcome>,
    pub failures: Vec<FailedOutcome>,
}

/// Runs every input in parallel; results keep input order. Missing
/// dependencies fail the whole batch rather than every request.
pub fn run_batch(
    inputs: &[WorkflowInput],
    mode: WorkflowMode,
    deps: &WorkflowDeps<'_>,
) -> Result<BatchResult, WorkflowError> {
    if mode.uses_retrieval() && deps.retriever.is_none() {
        return Err(WorkflowError::MissingIndex(mode.as_str()));
    }
    if mode.includes_ratings() && (deps.explainer.is_none() || deps.policy.is_none()) {
        return Err(WorkflowError::MissingPolicy(mode.as_str()));
    }
    let results: Vec<Result<RevisionOutcome, FailedOutcome>> = inputs
        .par_iter()
        .map(|i| run_workflow(i, mode, deps).map_err(|e| FailedOutcome::from_error(&i.id, mode, &e)))
        .collect();
    let mut batch = BatchResult::default();
    for r in results {
        match r {
            Ok(o) => batch.outcomes.push(o),
            Err(f) => batch.failures.push(f),
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Sample standard deviation over √n; 0 when n < 2.
    pub se: f64,
}

impl Estimate {
    pub fn of(values: &[f64]) -> Estimate {
        let n = values.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                se: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Estimate { mean, se: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Estimate {
            mean,
            se: (var / n as f64).sqrt(),
        }
    }

    /// "0.392 (0.002)"
    pub fn render(&self) -> String {
        format!("{:.3} ({:.3})", self.mean, self.se)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub p_before: Estimate,
    pub p_after: Estimate,
    pub delta: Estimate,
    pub improved: Estimate,
}

impl GroupSummary {
    fn of(outcomes: &[&RevisionOutcome]) -> GroupSummary {
        let col = |f: fn(&RevisionOutcome) -> f64| Estimate::of(&outcomes.iter().map(|o| f(o)).collect::<Vec<_>>());
        GroupSummary {
            n: outcomes.len(),
            p_before: col(|o| o.p_before),
            p_after: col(|o| o.p_after),
            delta: col(|o| o.delta),
            improved: col(|o| if o.improved { 1.0 } else { 0.0 }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowReport {
    pub workflow: WorkflowMode,
    pub median: f64,
    /// Lower half holds p_before < median.
    pub lower: GroupSummary,
    pub upper: GroupSummary,
    pub overall: GroupSummary,
    pub failed: usize,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Splits outcomes at the median of p_before into `p < median` and
/// `p ≥ median`.
pub fn median_split(outcomes: &[RevisionOutcome]) -> (f64, Vec<&RevisionOutcome>, Vec<&RevisionOutcome>) {
    let mut ps: Vec<f64> = outcomes.iter().map(|o| o.p_before).collect();
    ps.sort_by(f64::total_cmp);
    let m = median(&ps);
    let (lower, upper) = outcomes.iter().partition(|o| o.p_before < m);
    (m, lower, upper)
}

pub fn summarize(outcomes: &[RevisionOutcome], failed: usize) -> Result<WorkflowReport, WorkflowError> {
    if outcomes.len() < 2 {
        return Err(WorkflowError::TooFewOutcomes {
            needed: 2,
            got: outcomes.len(),
        });
    }
    let workflow = outcomes[0].workflow;
    if outcomes.iter().any(|o| o.workflow != workflow) {
        return Err(WorkflowError::InvalidArgument("outcomes mix several workflows".into()));
    }
    let (median, lower, upper) = median_split(outcomes);
    let all: Vec<&RevisionOutcome> = outcomes.iter().collect();
    Ok(WorkflowReport {
        workflow,
        median,
        lower: GroupSummary::of(&lower),
        upper: GroupSummary::of(&upper),
        overall: GroupSummary::of(&all),
        failed,
    })
}

pub const TABLE_GROUPS: [&str; 3] = ["Lower Half (p < median)", "Upper Half (p ≥ median)", "Overall"];
pub const TABLE_CELLS: [&str; 3] = ["p", "Δp", "improved"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub p: Estimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Estimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improved: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub revision_type: String,
    /// Lower half, upper half, overall.
    pub groups: Vec<TableCell>,
}

impl TableRow {
    /// Nine rendered cells; blank where the row has no change columns.
    pub fn rendered(&self) -> Vec<String> {
        self.groups
            .iter()
            .flat_map(|c| {
                [
                    c.p.render(),
                    c.delta.map(|e| e.render()).unwrap_or_default(),
                    c.improved.map(|e| e.render()).unwrap_or_default(),
                ]
            })
            .collect()
    }
}

/// Before/after comparison: an "Original Request" row, then one row per
/// workflow, each with p, Δp and improved under lower half, upper half
/// and overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub format: String,
    pub groups: Vec<String>,
    pub cells: Vec<String>,
    pub rows: Vec<TableRow>,
    pub reports: Vec<WorkflowReport>,
}

impl ComparisonTable {
    /// The original-request row comes from the first report.
    pub fn new(reports: Vec<WorkflowReport>) -> Result<ComparisonTable, WorkflowError> {
        let first = reports
            .first()
            .ok_or_else(|| WorkflowError::InvalidArgument("no workflow reports".into()))?;
        let groups = |r: &WorkflowReport| [r.lower, r.upper, r.overall];
        let mut rows = vec![TableRow {
            revision_type: "Original Request".into(),
            groups: groups(first)
                .iter()
                .map(|g| TableCell {
                    p: g.p_before,
                    delta: None,
                    improved: None,
                })
                .collect(),
        }];
        for r in &reports {
            rows.push(TableRow {
                revision_type: r.workflow.label().into(),
                groups: groups(r)
                    .iter()
                    .map(|g| TableCell {
                        p: g.p_after,
                        delta: Some(g.delta),
                        improved: Some(g.improved),
                    })
                    .collect(),
            });
        }
        Ok(ComparisonTable {
            format: REPORT_FORMAT.into(),
            groups: TABLE_GROUPS.iter().map(|s| s.to_string()).collect(),
            cells: TABLE_CELLS.iter().map(|s| s.to_string()).collect(),
            rows,
            reports,
        })
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["Revision Type".to_string()];
        for g in &self.groups {
            for c in &self.cells {
                h.push(format!("{g}: {c}"));
            }
        }
        h
    }

    /// Plain-text rendering with standard errors in parentheses.
    pub fn render(&self) -> String {
        let mut lines = vec![self.header().join(" | ")];
        for r in &self.rows {
            let mut cells = vec![r.revision_type.clone()];
            cells.extend(r.rendered());
            lines.push(cells.join(" | "));
        }
        lines.join("\n") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowessCurve {
    pub frac: f64,
    /// Strictly increasing x with smoothed y.
    pub points: Vec<(f64, f64)>,
}

impl LowessCurve {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["x", "y"]).expect("in-memory write");
        for (x, y) in &self.points {
            w.write_record([x.to_string(), y.to_string()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// Locally weighted linear regression with tricube weights over the
/// `ceil(frac·n)` nearest points, evaluated at each distinct x. A window
/// whose x values coincide falls back to the weighted local mean.
pub fn lowess(x: &[f64], y: &[f64], frac: f64) -> Result<LowessCurve, WorkflowError> {
    if x.len() != y.len() {
        return Err(WorkflowError::InvalidArgument(format!(
            "x has {} values, y has {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 5 {
        return Err(WorkflowError::TooFewOutcomes {
            needed: 5,
            got: x.len(),
        });
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(WorkflowError::InvalidArgument(format!(
            "frac must lie in (0, 1], got {frac}"
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(WorkflowError::InvalidArgument("non-finite input".into()));
    }
    let n = x.len();
    let r = ((frac * n as f64).ceil() as usize).clamp(2, n);
    let mut xs: Vec<f64> = x.to_vec();
    xs.sort_by(f64::total_cmp);
    xs.dedup();

    let points = xs
        .par_iter()
        .map(|&x0| {
            let mut d: Vec<f64> = x.iter().map(|xi| (xi - x0).abs()).collect();
            d.sort_by(f64::total_cmp);
            let h = d[r - 1];
            let weights: Vec<f64> = x
                .iter()
                .map(|xi| {
                    let di = (xi - x0).abs();
                    if h == 0.0 {
                        if di == 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    } else if di < h {
                        (1.0 - (di / h).powi(3)).powi(3)
                    } else {
                        0.0
                    }
                })
                .collect();
            let sw: f64 = weights.iter().sum();
            let mx = weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() / sw;
            let my = weights.iter().zip(y).map(|(w, v)| w * v).sum::<f64>() / sw;
            let sxx: f64 = weights.iter().zip(x).map(|(w, v)| w * (v - mx).powi(2)).sum();
            let sxy: f64 = weights
                .iter()
                .zip(x.iter().zip(y))
                .map(|(w, (a, b))| w * (a - mx) * (b - my))
                .sum();
            let scale = x.iter().map(|v| v.abs()).fold(1.0, f64::max);
            let fitted = if sxx <= 1e-12 * scale * scale * sw {
                my
            } else {
                my + sxy / sxx * (x0 - mx)
            };
            (x0, fitted)
        })
        .collect();
    Ok(LowessCurve { frac, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileRow {
    /// 1 through 10.
    pub decile: usize,
    pub n: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub share_improved: f64,
}

/// Share improved within deciles of p_before. Deciles are rank-based:
/// sorted position i (ties by id) falls in decile `floor(10·i/n) + 1`.
pub fn decile_improvement(outcomes: &[RevisionOutcome]) -> Result<Vec<DecileRow>, WorkflowError> {
    let n = outcomes.len();
    if n < 10 {
        return Err(WorkflowError::TooFewOutcomes { needed: 10, got: n });
    }
    let mut order: Vec<&RevisionOutcome> = outcomes.iter().collect();
    order.sort_by(|a, b| a.p_before.total_cmp(&b.p_before).then_with(|| a.id.cmp(&b.id)));
    let mut rows: Vec<DecileRow> = (1..=10)
        .map(|d| DecileRow {
            decile: d,
            n: 0,
            p_min: f64::INFINITY,
            p_max: f64::NEG_INFINITY,
            share_improved: 0.0,
        })
        .collect();
    for (i, o) in order.iter().enumerate() {
        let row = &mut rows[10 * i / n];
        row.n += 1;
        row.p_min = row.p_min.min(o.p_before);
        row.p_max = row.p_max.max(o.p_before);
        if o.improved {
            row.share_improved += 1.0;
        }
    }
    for r in &mut rows {
        r.share_improved /= r.n as f64;
    }
    Ok(rows)
}

pub fn deciles_csv(rows: &[DecileRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["decile", "n", "p_min", "p_max", "share_improved"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.decile.to_string(),
            r.n.to_string(),
            r.p_min.to_string(),
            r.p_max.to_string(),
            r.share_improved.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Per-workflow artifacts written by [`write_artifacts`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowArtifacts {
    pub batch: BatchResult,
    pub report: WorkflowReport,
    pub lowess: LowessCurve,
    pub deciles: Vec<DecileRow>,
}

pub fn analyze(batch: BatchResult, frac: f64) -> Result<WorkflowArtifacts, WorkflowError> {
    let report = summarize(&batch.outcomes, batch.failures.len())?;
    let x: Vec<f64> = batch.outcomes.iter().map(|o| o.p_before).collect();
    let y: Vec<f64> = batch.outcomes.iter().map(|o| o.p_after).collect();
    let lowess = lowess(&x, &y, frac)?;
    let deciles = decile_improvement(&batch.outcomes)?;
    Ok(WorkflowArtifacts {
        batch,
        report,
        lowess,
        deciles,
    })
}

/// Writes `outcomes.jsonl`, `failures.jsonl`, `lowess.csv` and `deciles.csv`
/// under `dir/<workflow>/`, plus `workflow_report.json` and
/// `workflow_report.txt` in `dir` covering every workflow.
pub fn write_artifacts(dir: &Path, runs: &[WorkflowArtifacts]) -> Result<ComparisonTable, WorkflowError> {
    std::fs::create_dir_all(dir).map_err(|e| ArtifactError::io(dir, e))?;
    for run in runs {
        let sub = dir.join(run.report.workflow.as_str());
        std::fs::create_dir_all(&sub).map_err(|e| ArtifactError::io(&sub, e))?;
        write_jsonl(&sub.join("outcomes.jsonl"), &run.batch.outcomes)?;
        write_jsonl(&sub.join("failures.jsonl"), &run.batch.failures)?;
        write_text(&sub.join("lowess.csv"), &run.lowess.to_csv())?;
        write_text(&sub.join("deciles.csv"), &deciles_csv(&run.deciles))?;
    }
    let table = ComparisonTable::new(runs.iter().map(|r| r.report.clone()).collect())?;
    write_json(&dir.join("workflow_report.json"), &table)?;
    write_text(&dir.join("workflow_report.txt"), &table.render())?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(id: &str, before: f64, after: f64) -> RevisionOutcome {
        RevisionOutcome::new(id.into(), WorkflowMode::Basic, before, after)
    }

    #[test]
    fn hand_computed_summary() {
        let os = vec![
            outcome("a", 0.2, 0.3),
            outcome("b", 0.4, 0.4),
            outcome("c", 0.6, 0.5),
            outcome("d", 0.8, 1.0),
        ];
        let r = summarize(&os, 1).unwrap();
        assert_eq!(r.median, 0.5);
        assert_eq!((r.lower.n, r.upper.n, r.overall.n, r.failed), (2, 2, 4, 1));
        // Lower deltas 0.1, 0.0: mean 0.05, sd √0.005, se √0.005/√2 = 0.05.
        assert!((r.lower.delta.mean - 0.05).abs() < 1e-12);
        assert!((r.lower.delta.se - 0.05).abs() < 1e-12);
        assert_eq!(r.lower.improved.mean, 0.5);
        // Upper deltas −0.1, 0.2: mean 0.05, sd √0.045, se 0.15.
        assert!((r.upper.delta.mean - 0.05).abs() < 1e-12);
        assert!((r.upper.delta.se - 0.15).abs() < 1e-12);
        assert!((r.overall.p_before.mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ties_at_the_median_go_up() {
        let os: Vec<_> = [0.1, 0.5, 0.5, 0.5, 0.9]
            .iter()
            .enumerate()
            .map(|(i, &p)| outcome(&i.to_string(), p, p))
            .collect();
        let (m, lower, upper) = median_split(&os);
        assert_eq!(m, 0.5);
        assert_eq!((lower.len(), upper.len()), (1, 4));
        let r = summarize(&os, 0).unwrap();
        assert_eq!(r.overall.delta.mean, 0.0);
        assert_eq!(r.overall.improved.mean, 0.0);
    }

    #[test]
    fn constant_delta_has_zero_se() {
        let os: Vec<_> = (0..7)
            .map(|i| outcome(&i.to_string(), i as f64 / 10.0, i as f64 / 10.0 + 0.25))
            .collect();
        let r = summarize(&os, 0).unwrap();
        assert!((r.overall.delta.mean - 0.25).abs() < 1e-12);
        assert!(r.overall.delta.se < 1e-12);
    }

    #[test]
    fn table_layout() {
        let os = vec![
            outcome("a", 0.2, 0.3),
            outcome("b", 0.4, 0.4),
            outcome("c", 0.6, 0.5),
            outcome("d", 0.8, 1.0),
        ];
        let t = ComparisonTable::new(vec![summarize(&os, 0).unwrap()]).unwrap();
        assert_eq!(t.header().len(), 10);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].revision_type, "Original Request");
        assert_eq!(t.rows[0].rendered()[1], "");
        assert_eq!(t.rows[1].rendered()[1], "0.050 (0.050)");
        assert!(t.render().lines().nth(2).unwrap().starts_with("Basic Workflow | 0.350"));
    }

    #[test]
    fn lowess_basics() {
        let x: Vec<f64> = (0..20).map(|i| (i % 10) as f64).collect();
        let c = lowess(&x, &vec![3.5; 20], 0.3).unwrap();
        assert_eq!(c.points.len(), 10);
        assert!(c.points.windows(2).all(|w| w[0].0 < w[1].0));
        assert!(c.points.iter().all(|p| (p.1 - 3.5).abs() < 1e-12));
        assert!(lowess(&[1.0; 4], &[1.0; 4], 0.3).is_err());
        assert!(lowess(&[1.0; 6], &[1.0; 6], 0.0).is_err());
        let flat = lowess(&[2.0; 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 0.5).unwrap();
        assert_eq!(flat.points, vec![(2.0, 3.5)]);
    }

    #[test]
    fn deciles_by_enumeration() {
        let os: Vec<_> = (0..40)
            .map(|i| {
                let mut o = outcome(&format!("{i:02}"), i as f64 / 40.0, 0.0);
                o.improved = i % 2 == 0;
                o
            })
            .collect();
        let rows = decile_improvement(&os).unwrap();
        assert_eq!(rows.iter().map(|r| r.n).sum::<usize>(), 40);
        assert!(rows.iter().all(|r| r.n == 4 && r.share_improved == 0.5));
        let all: Vec<_> = (0..13)
            .map(|i| outcome(&i.to_string(), i as f64, i as f64 + 1.0))
            .collect();
        let rows = decile_improvement(&all).unwrap();
        assert_eq!(rows.iter().map(|r| r.n).sum::<usize>(), 13);
        assert!(rows.iter().all(|r| r.share_improved == 1.0));
    }
}
