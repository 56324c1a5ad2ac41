//! HTTP service over a loaded [`Runtime`]. Handlers are thin: each one
//! forwards to the same library call the CLI makes.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use referral_forge::explainer::AttributionReport;
use referral_forge::retriever::RetrievalQueryResult;
use referral_forge::workflow::{
    analyze, run_batch, summarize, BatchResult, ComparisonTable, DecileRow, FailedOutcome, LowessCurve,
    RevisionOutcome, WorkflowError, WorkflowInput, WorkflowMode, WorkflowReport,
};

use crate::pipeline::Runtime;

/// Error body: a machine code, a human message and whether retrying the
/// same request may succeed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub retryable: bool,
    #[serde(skip)]
    status: u16,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>, retryable: bool) -> Self {
        ApiError {
            code: code.into(),
            message: message.into(),
            retryable,
            status: status.as_u16(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", message, false)
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message, false)
    }

    pub fn status(&self) -> StatusCode {
        StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}

impl From<WorkflowError> for ApiError {
    fn from(e: WorkflowError) -> Self {
        let code = e.kind();
        let (status, retryable) = match code {
            "index_missing" | "policy_missing" => (StatusCode::CONFLICT, false),
            "prompt_rejected" | "validation_failure" | "invalid_argument" => (StatusCode::UNPROCESSABLE_ENTITY, false),
            "parse_failure" => (StatusCode::BAD_GATEWAY, true),
            "provider_unavailable" => (StatusCode::SERVICE_UNAVAILABLE, true),
            "reward_failure" | "retrieval_failure" | "explain_failure" => {
                let retryable = match &e {
                    WorkflowError::Reward(r) => r.is_retryable(),
                    WorkflowError::Retriever(referral_forge::retriever::RetrieverError::Embed(x)) => x.is_retryable(),
                    _ => false,
                };
                if retryable {
                    (StatusCode::SERVICE_UNAVAILABLE, true)
                } else {
                    (StatusCode::INTERNAL_SERVER_ERROR, false)
                }
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, false),
        };
        ApiError::new(status, code, e.to_string(), retryable)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
        .map(Json)
}

#[derive(Clone)]
pub struct AppState {
    pub runtime: Arc<Runtime>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextRequest {
    pub title: String,
    #[serde(default)]
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub p: f64,
    pub logit: f64,
    pub encoder_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub title: String,
    #[serde(default)]
    pub content: String,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReviseParams {
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub include_ratings: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReviseRequest {
    #[serde(default)]
    pub id: Option<String>,
    pub title: String,
    #[serde(default)]
    pub content: String,
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub include_ratings: Option<bool>,
}

/// `mode` is `basic`, `rag` or `rag_no_ratings`; `include_ratings=false`
/// turns `rag` into the ratings ablation.
pub fn resolve_mode(mode: Option<&str>, include_ratings: Option<bool>) -> Result<WorkflowMode, ApiError> {
    let mode = match mode {
        None => WorkflowMode::Basic,
        Some(m) => WorkflowMode::parse(m).ok_or_else(|| {
            ApiError::bad_request(format!("unknown mode {m:?} (expected basic, rag or rag_no_ratings)"))
        })?,
    };
    Ok(match (mode, include_ratings) {
        (WorkflowMode::Rag, Some(false)) => WorkflowMode::RagNoRatings,
        (WorkflowMode::RagNoRatings, Some(true)) => {
            return Err(ApiError::bad_request("rag_no_ratings cannot include ratings"));
        }
        (m, _) => m,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchEvalRequest {
    pub requests: Vec<WorkflowInput>,
    #[serde(default = "default_modes")]
    pub modes: Vec<WorkflowMode>,
    #[serde(default)]
    pub lowess_frac: Option<f64>,
}

fn default_modes() -> Vec<WorkflowMode> {
    vec![WorkflowMode::Basic]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchRun {
    pub workflow: WorkflowMode,
    pub outcomes: Vec<RevisionOutcome>,
    pub failures: Vec<FailedOutcome>,
    /// Present with at least two outcomes.
    pub report: Option<WorkflowReport>,
    /// Present with at least ten outcomes.
    pub lowess: Option<LowessCurve>,
    pub deciles: Option<Vec<DecileRow>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchEvalResponse {
    pub runs: Vec<BatchRun>,
    pub table: Option<ComparisonTable>,
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    let rt = &s.runtime;
    let m = rt.reward.model();
    Json(serde_json::json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "model": {
            "format": m.format,
            "encoder_id": m.encoder_id,
            "encoder_version": m.encoder_version,
            "lambda": m.lambda,
            "nonzero_weights": m.nonzero_weights(),
        },
        "index": rt.index.as_ref().map(|i| serde_json::json!({
            "format": i.meta.format,
            "entries": i.len(),
            "clusters": i.meta.clusters,
            "p_max": i.p_max(),
            "embedder": i.meta.embedder,
        })),
        "policy": rt.policy.as_ref().map(|p| p.format.clone()),
        "explainer": rt.explainer.method(),
        "templates": rt.templates.version,
        "lexicon": rt.lexicon.version(),
        "provider": rt.provider.name(),
    }))
}

async fn score(State(s): State<AppState>, body: Result<Json<TextRequest>, JsonRejection>) -> ApiResult<ScoreResponse> {
    let Json(req) = body?;
    blocking(move || {
        let reward = &s.runtime.reward;
        let logit = reward.logit(&req.title, &req.content).map_err(WorkflowError::from)?;
        let p = reward.score(&req.title, &req.content).map_err(WorkflowError::from)?;
        Ok(ScoreResponse {
            p,
            logit,
            encoder_id: reward.model().encoder_id.clone(),
        })
    })
    .await
}

async fn explain(
    State(s): State<AppState>,
    body: Result<Json<TextRequest>, JsonRejection>,
) -> ApiResult<AttributionReport> {
    let Json(req) = body?;
    blocking(move || {
        let rt = &s.runtime;
        let policy = rt.policy.as_ref().ok_or(WorkflowError::MissingPolicy("explain"))?;
        Ok(rt
            .explainer
            .explain(&req.title, &req.content, policy)
            .map_err(WorkflowError::from)?)
    })
    .await
}

async fn retrieve(
    State(s): State<AppState>,
    body: Result<Json<RetrieveRequest>, JsonRejection>,
) -> ApiResult<RetrievalQueryResult> {
    let Json(req) = body?;
    blocking(move || {
        let rt = &s.runtime;
        let index = rt.index.as_ref().ok_or(WorkflowError::MissingIndex("retrieve"))?;
        let k = req.k.unwrap_or(rt.config.workflow.examples);
        if k == 0 || k > referral_forge::improver::MAX_EXAMPLES {
            return Err(ApiError::bad_request(format!(
                "k must lie in 1..={}",
                referral_forge::improver::MAX_EXAMPLES
            )));
        }
        Ok(index
            .query(&req.title, &req.content, &rt.reward, rt.embedder.as_ref(), k)
            .map_err(WorkflowError::from)?)
    })
    .await
}

async fn revise(
    State(s): State<AppState>,
    query: Result<Query<ReviseParams>, QueryRejection>,
    body: Result<Json<ReviseRequest>, JsonRejection>,
) -> ApiResult<RevisionOutcome> {
    let Query(params) = query?;
    let Json(req) = body?;
    let mode = resolve_mode(
        params.mode.as_deref().or(req.mode.as_deref()),
        params.include_ratings.or(req.include_ratings),
    )?;
    blocking(move || {
        let input = WorkflowInput {
            id: req.id.unwrap_or_else(|| "draft".into()),
            title: req.title,
            content: req.content,
        };
        Ok(referral_forge::workflow::run_workflow(&input, mode, &s.runtime.deps())?)
    })
    .await
}

fn batch_run(batch: BatchResult, workflow: WorkflowMode, frac: f64) -> Result<BatchRun, WorkflowError> {
    let n = batch.outcomes.len();
    if n >= 10 {
        let a = analyze(batch, frac)?;
        return Ok(BatchRun {
            workflow,
            outcomes: a.batch.outcomes,
            failures: a.batch.failures,
            report: Some(a.report),
            lowess: Some(a.lowess),
            deciles: Some(a.deciles),
        });
    }
    let report = if n >= 2 {
        Some(summarize(&batch.outcomes, batch.failures.len())?)
    } else {
        None
    };
    Ok(BatchRun {
        workflow,
        outcomes: batch.outcomes,
        failures: batch.failures,
        report,
        lowess: None,
        deciles: None,
    })
}

async fn batch_eval(
    State(s): State<AppState>,
    body: Result<Json<BatchEvalRequest>, JsonRejection>,
) -> ApiResult<BatchEvalResponse> {
    let Json(req) = body?;
    if req.requests.is_empty() || req.modes.is_empty() {
        return Err(ApiError::bad_request("requests and modes must be nonempty"));
    }
    blocking(move || {
        let rt = &s.runtime;
        let frac = req.lowess_frac.unwrap_or(rt.config.workflow.lowess_frac);
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(ApiError::bad_request("lowess_frac must lie in (0, 1]"));
        }
        let deps = rt.deps();
        let mut runs = Vec::with_capacity(req.modes.len());
        for &mode in &req.modes {
            runs.push(batch_run(run_batch(&req.requests, mode, &deps)?, mode, frac)?);
        }
        let reports: Vec<WorkflowReport> = runs.iter().filter_map(|r| r.report.clone()).collect();
        let table = if reports.len() == runs.len() {
            Some(ComparisonTable::new(reports)?)
        } else {
            None
        };
        Ok(BatchEvalResponse { runs, table })
    })
    .await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint", false)
}

pub fn router(runtime: Arc<Runtime>) -> Router {
    let limit = runtime.config.server.max_body_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/score", post(score))
        .route("/explain", post(explain))
        .route("/retrieve", post(retrieve))
        .route("/revise", post(revise))
        .route("/batch-eval", post(batch_eval))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(limit))
        .with_state(AppState { runtime })
}

/// Binds and serves until Ctrl-C.
pub async fn serve(runtime: Arc<Runtime>, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {bind}: {e}"))?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(runtime))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
