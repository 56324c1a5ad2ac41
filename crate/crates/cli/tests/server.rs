use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use referral_forge::fixture::{generate, FixtureConfig};
use referral_forge_cli::config::AppConfig;
use referral_forge_cli::pipeline::{self, Runtime};
use referral_forge_cli::server::router;

struct World {
    _dir: tempfile::TempDir,
    cfg: AppConfig,
    runtime: Arc<Runtime>,
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = AppConfig::default();
        cfg.paths.corpus = dir.path().join("corpus");
        cfg.paths.artifacts = dir.path().join("artifacts");
        cfg.train.folds = 3;
        cfg.train.grid_points = 4;
        cfg.train.max_iter = 2000;
        cfg.index.ig_steps = 16;
        generate(&FixtureConfig {
            requests: 600,
            ..Default::default()
        })
        .write(&cfg.paths.corpus)
        .unwrap();
        pipeline::ingest(&cfg).unwrap();
        pipeline::train(&cfg).unwrap();
        pipeline::index(&cfg).unwrap();
        let runtime = Arc::new(Runtime::load(&cfg).unwrap());
        World {
            _dir: dir,
            cfg,
            runtime,
        }
    })
}

async fn call(app: axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

const TITLE: &str = "Referral for [SENIORITY] [ROLE] at [FIRM_NAME]";
const BODY: &str = "I have [YOE] in backend work. Happy to share my resume.";

#[tokio::test]
async fn health_reports_loaded_artifacts() {
    let w = world();
    let (status, v) = call(router(w.runtime.clone()), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model"]["encoder_id"], w.runtime.reward.model().encoder_id.as_str());
    assert!(v["index"]["entries"].as_u64().unwrap() > 0);
    assert_eq!(v["templates"], "prompts-v1");
}

#[tokio::test]
async fn score_matches_the_library() {
    let w = world();
    let (status, v) = call(
        router(w.runtime.clone()),
        "POST",
        "/score",
        Some(json!({"title": TITLE, "content": BODY})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["p"].as_f64().unwrap(), w.runtime.reward.score(TITLE, BODY).unwrap());
    let p = v["p"].as_f64().unwrap();
    assert!((1.0 / (1.0 + (-v["logit"].as_f64().unwrap()).exp()) - p).abs() < 1e-12);
}

#[tokio::test]
async fn malformed_bodies_are_rejected() {
    let w = world();
    let (status, v) = call(
        router(w.runtime.clone()),
        "POST",
        "/score",
        Some(json!({"content": BODY})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "invalid_request");
    assert_eq!(v["retryable"], false);
    let (status, v) = call(
        router(w.runtime.clone()),
        "POST",
        "/revise?mode=fancy",
        Some(json!({"title": TITLE})),
    )
    .await;
    assert_eq!(
        (status, v["code"].as_str()),
        (StatusCode::BAD_REQUEST, Some("invalid_request"))
    );
    let (status, _) = call(router(w.runtime.clone()), "GET", "/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn rag_without_an_index_is_a_conflict() {
    let w = world();
    let mut cfg = w.cfg.clone();
    let empty = tempfile::tempdir().unwrap();
    cfg.paths.index = Some(empty.path().to_path_buf());
    let bare = Arc::new(Runtime::load(&cfg).unwrap());
    assert!(bare.index.is_none());
    let (status, v) = call(
        router(bare.clone()),
        "POST",
        "/revise?mode=rag",
        Some(json!({"title": TITLE, "content": BODY})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["code"], "index_missing");
    let (status, v) = call(
        router(bare.clone()),
        "POST",
        "/retrieve",
        Some(json!({"title": TITLE, "content": BODY})),
    )
    .await;
    assert_eq!(
        (status, v["code"].as_str()),
        (StatusCode::CONFLICT, Some("index_missing"))
    );
    let (status, v) = call(
        router(bare),
        "POST",
        "/explain",
        Some(json!({"title": TITLE, "content": BODY})),
    )
    .await;
    assert_eq!(
        (status, v["code"].as_str()),
        (StatusCode::CONFLICT, Some("policy_missing"))
    );
}

#[tokio::test]
async fn explain_retrieve_and_revise() {
    let w = world();
    let app = router(w.runtime.clone());
    let (status, v) = call(
        app.clone(),
        "POST",
        "/explain",
        Some(json!({"title": TITLE, "content": BODY})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert!(!v["ratings"]["sentences"].as_array().unwrap().is_empty());

    let (status, v) = call(
        app.clone(),
        "POST",
        "/retrieve",
        Some(json!({"title": TITLE, "content": BODY, "k": 3})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let threshold = v["threshold"].as_f64().unwrap();
    let examples = v["examples"].as_array().unwrap();
    assert!(examples.len() <= 3);
    assert!(examples.iter().all(|e| e["p"].as_f64().unwrap() >= threshold));
    let (status, _) = call(app.clone(), "POST", "/retrieve", Some(json!({"title": TITLE, "k": 9}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, v) = call(
        app.clone(),
        "POST",
        "/revise?mode=rag&include_ratings=false",
        Some(json!({"title": TITLE, "content": BODY})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["workflow"], "rag_no_ratings");
    let (status, v) = call(
        app.clone(),
        "POST",
        "/revise",
        Some(json!({"title": TITLE, "content": BODY, "mode": "basic"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["workflow"], "basic");

    let (status, v) = call(
        app,
        "POST",
        "/revise",
        Some(json!({"title": "Referral at Google", "content": "I have 5 years."})),
    )
    .await;
    assert_eq!(
        (status, v["code"].as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, Some("prompt_rejected"))
    );
}

#[tokio::test]
async fn batch_eval_summarizes_each_mode() {
    let w = world();
    let corpus = pipeline::Corpus::load(&w.cfg).unwrap();
    let requests: Vec<Value> = corpus
        .test()
        .iter()
        .take(12)
        .map(|r| json!({"id": r.id, "title": r.masked_title, "content": r.masked_body}))
        .collect();
    let body = json!({"requests": requests, "modes": ["basic", "rag"]});
    let (status, v) = call(router(w.runtime.clone()), "POST", "/batch-eval", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let runs = v["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["outcomes"].as_array().unwrap().len(), 12);
    assert!(runs[1]["lowess"]["points"].is_array());
    assert_eq!(v["table"]["rows"].as_array().unwrap().len(), 3);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_are_independent() {
    let w = world();
    let app = router(w.runtime.clone());
    let bodies: Vec<(String, String)> = (0..16)
        .map(|i| {
            (
                format!("{TITLE} {i}"),
                if i % 2 == 0 { BODY.to_string() } else { String::new() },
            )
        })
        .collect();
    let handles: Vec<_> = bodies
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, (t, c))| {
            let app = app.clone();
            let uri = if i % 3 == 0 { "/explain" } else { "/score" };
            tokio::spawn(async move {
                (
                    uri,
                    call(app, "POST", uri, Some(json!({"title": t, "content": c}))).await,
                )
            })
        })
        .collect();
    for (h, (t, c)) in handles.into_iter().zip(&bodies) {
        let (uri, (status, v)) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        let p = w.runtime.reward.score(t, c).unwrap();
        if uri == "/score" {
            assert_eq!(v["p"].as_f64().unwrap(), p);
        } else {
            assert!((v["p"].as_f64().unwrap() - p).abs() < 1e-12, "{v}");
        }
    }
}
