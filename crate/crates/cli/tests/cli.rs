use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[paths]
corpus = "corpus"
artifacts = "artifacts"

[train]
folds = 3
grid_points = 4
max_iter = 2000

[evaluate]
bootstrap = 100
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_referral-forge"))
        .current_dir(dir)
        .args(args)
        .env_remove("REFERRAL_FORGE_CONFIG")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> serde_json::Value {
    let mut full = vec!["--config", "config.toml"];
    full.extend_from_slice(args);
    let out = run(dir, &full);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_fails_fast() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), "[train]\nfolds = 3\nfoldz = 4\n").unwrap();
    let out = run(dir.path(), &["--config", "config.toml", "print-config"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("foldz"));
}

#[test]
fn evaluate_before_train_names_the_missing_model() {
    let dir = workspace();
    ok(dir.path(), &["gen-fixture", "--requests", "200"]);
    ok(dir.path(), &["ingest"]);
    let out = run(dir.path(), &["--config", "config.toml", "evaluate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("model artifact") && err.contains("referral-forge train"),
        "{err}"
    );
}

#[test]
fn fixture_pipeline_through_the_binary() {
    let dir = workspace();
    let d = dir.path();
    let fx = ok(d, &["gen-fixture", "--requests", "600"]);
    assert!(fx["posts"].as_u64().unwrap() >= 600);
    assert!(d.join("corpus/comments.jsonl").is_file());
    let ingest = ok(d, &["ingest"]);
    assert!(ingest["requests"].as_u64().unwrap() >= 500);
    assert!(ok(d, &["train"])["nonzero_weights"].as_u64().unwrap() > 0);
    let eval = ok(d, &["evaluate"]);
    assert!(eval["auroc"].as_f64().unwrap() > 0.5, "{eval}");
    for f in [
        "metrics_report.json",
        "calibration.csv",
        "prob_stats.json",
        "cv_report.json",
    ] {
        assert!(d.join("artifacts").join(f).is_file(), "{f}");
    }

    let title = "Referral for [ROLE] at [FIRM_NAME]";
    let rag = run(
        d,
        &["--config", "config.toml", "revise", "--mode", "rag", "--title", title],
    );
    assert_eq!(rag.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&rag.stderr).contains("index"));
    let basic = ok(
        d,
        &[
            "revise",
            "--mode",
            "basic",
            "--provider",
            "echo",
            "--title",
            title,
            "--body",
            "I have [YOE].",
        ],
    );
    assert_eq!(basic["delta"].as_f64(), Some(0.0));

    let idx = ok(d, &["index"]);
    assert!(idx["entries"].as_u64().unwrap() >= 5);
    let rag = ok(
        d,
        &["revise", "--mode", "rag", "--title", title, "--body", "I have [YOE]."],
    );
    assert_eq!(rag["workflow"], "rag");
    let explained = ok(
        d,
        &["explain", "--title", title, "--body", "I have [YOE]. Happy to chat."],
    );
    assert!(
        explained["ratings"]["sentences"].as_array().unwrap().len() >= 2,
        "{explained}"
    );

    let batch = ok(d, &["batch-eval", "--mode", "basic", "--mode", "rag", "--limit", "40"]);
    assert_eq!(batch["requests"].as_u64(), Some(40));
    assert_eq!(batch["table"].as_array().unwrap().len(), 3);
    let report = d.join("artifacts/reports");
    assert!(report.join("workflow_report.txt").is_file());
    assert!(report.join("rag/lowess.csv").is_file());
    assert!(!report.join("rag_no_ratings").exists());

    let printed = run(d, &["--config", "config.toml", "print-config"]);
    let text = String::from_utf8(printed.stdout).unwrap();
    let parsed: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(parsed["train"]["folds"].as_integer(), Some(3));
}
