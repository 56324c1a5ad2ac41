use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use referral_forge::corpus::{label_and_assemble, split_by_date, threshold_for_fraction, Lexicon, ReferralRequest};
use referral_forge::encoders::{EmbeddingProvider, Encoder, HashingEmbedder};
use referral_forge::explainer::{Explainer, RatingPolicy};
use referral_forge::fixture::{generate, FixtureConfig};
use referral_forge::improver::{EchoProvider, PromptTemplates, TopExampleProvider};
use referral_forge::metrics::auroc;
use referral_forge::model::{train_l1, FitOptions};
use referral_forge::retriever::{
    eligibility_threshold, prepare_candidates, IndexConfig, RetrievalIndex, RetrievalQueryResult, Retriever,
    RetrieverError,
};
use referral_forge::reward::RewardModel;
use referral_forge::workflow::{
    analyze, run_batch, run_workflow, write_artifacts, WorkflowDeps, WorkflowInput, WorkflowMode, WorkflowSettings,
};

struct World {
    reward: Arc<RewardModel>,
    embedder: Arc<HashingEmbedder>,
    index: RetrievalIndex,
    policy: RatingPolicy,
    explainer: Explainer,
    test: Vec<ReferralRequest>,
    lexicon: Lexicon,
    templates: PromptTemplates,
}

fn world() -> World {
    let lexicon = Lexicon::new(Default::default()).unwrap();
    let fx = generate(&FixtureConfig {
        requests: 1000,
        ..Default::default()
    });
    let requests = label_and_assemble(&fx.posts, &fx.comments, &lexicon).unwrap().requests;
    let split = split_by_date(&requests, threshold_for_fraction(&requests, 0.8).unwrap()).unwrap();
    let (train, test) = split.partition(&requests);

    let embedder = Arc::new(HashingEmbedder::new(128, 0));
    let encoder = Encoder::Embedding(embedder.clone());
    let pairs: Vec<(&str, &str)> = train
        .iter()
        .map(|r| (r.masked_title.as_str(), r.masked_body.as_str()))
        .collect();
    let x = encoder.encode_all(&pairs).unwrap();
    let y: Vec<bool> = train.iter().map(|r| r.label).collect();
    let fit = train_l1(&x, &y, 1e-3, &FitOptions::default()).unwrap();
    let reward = Arc::new(RewardModel::new(fit.into_model(encoder.id(), encoder.version()), encoder).unwrap());

    let explainer = Explainer::new(reward.clone(), 32);
    let policy = explainer.calibrate_policy(&pairs).unwrap();
    let candidates = prepare_candidates(&train, &reward, embedder.as_ref()).unwrap();
    let mut index = RetrievalIndex::build(
        candidates,
        &IndexConfig::default(),
        embedder.name(),
        &reward.encoder().id(),
    )
    .unwrap();
    let ratings: HashMap<_, _> = index
        .entries
        .iter()
        .map(|e| {
            (
                e.id.clone(),
                explainer.explain(&e.title, &e.body, &policy).unwrap().ratings,
            )
        })
        .collect();
    assert!(index.attach_ratings(&ratings).is_empty());
    World {
        reward,
        embedder,
        index,
        policy,
        explainer,
        test: test.into_iter().cloned().collect(),
        lexicon,
        templates: PromptTemplates::default(),
    }
}

fn inputs(w: &World) -> Vec<WorkflowInput> {
    w.test
        .iter()
        .map(|r| WorkflowInput {
            id: r.id.clone(),
            title: r.masked_title.clone(),
            content: r.masked_body.clone(),
        })
        .collect()
}

struct CountingRetriever<'a> {
    inner: &'a RetrievalIndex,
    calls: AtomicUsize,
}

impl Retriever for CountingRetriever<'_> {
    fn retrieve(&self, p: f64, embedding: &[f64], k: usize) -> Result<RetrievalQueryResult, RetrieverError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.retrieve(p, embedding, k)
    }
}

#[test]
fn fixture_pipeline_end_to_end() {
    let w = world();
    let inputs = inputs(&w);
    let scores: Vec<f64> = inputs
        .iter()
        .map(|i| w.reward.score(&i.title, &i.content).unwrap())
        .collect();
    let labels: Vec<bool> = w.test.iter().map(|r| r.label).collect();
    assert!(auroc(&scores, &labels).unwrap() > 0.6);

    let counting = CountingRetriever {
        inner: &w.index,
        calls: AtomicUsize::new(0),
    };
    let deps = |provider: &'static dyn referral_forge::improver::CompletionProvider| WorkflowDeps {
        reward: &w.reward,
        embedder: w.embedder.as_ref(),
        retriever: Some(&counting),
        explainer: Some(&w.explainer),
        policy: Some(&w.policy),
        provider,
        templates: &w.templates,
        lexicon: &w.lexicon,
        settings: WorkflowSettings::default(),
    };

    let basic = run_batch(&inputs, WorkflowMode::Basic, &deps(&EchoProvider)).unwrap();
    assert_eq!(counting.calls.load(Ordering::SeqCst), 0);
    assert!(basic.failures.is_empty());
    assert!(basic.outcomes.iter().all(|o| o.delta == 0.0 && !o.improved));

    let rag = run_batch(&inputs, WorkflowMode::Rag, &deps(&TopExampleProvider)).unwrap();
    assert_eq!(counting.calls.load(Ordering::SeqCst), inputs.len());
    assert!(rag.failures.is_empty(), "{:?}", rag.failures.first());
    for o in &rag.outcomes {
        if o.p_before < w.index.p_max() {
            assert!(o.p_after >= eligibility_threshold(o.p_before, w.index.p_max()));
            assert!(o.improved);
        }
    }
    let ablated = run_batch(&inputs, WorkflowMode::RagNoRatings, &deps(&TopExampleProvider)).unwrap();

    let runs: Vec<_> = [basic, rag, ablated]
        .into_iter()
        .map(|b| analyze(b, 0.3).unwrap())
        .collect();
    let rag_report = &runs[1].report;
    assert!(rag_report.lower.delta.mean > 0.0);
    assert!(rag_report.lower.improved.mean >= 0.9);
    assert_eq!(runs[0].report.overall.improved.mean, 0.0);

    let dir = tempfile::tempdir().unwrap();
    let table = write_artifacts(dir.path(), &runs).unwrap();
    assert_eq!(
        table.rows.iter().map(|r| r.revision_type.as_str()).collect::<Vec<_>>(),
        ["Original Request", "Basic Workflow", "RAG Workflow", "Exclude Ratings"]
    );
    for f in [
        "basic/outcomes.jsonl",
        "rag/lowess.csv",
        "rag_no_ratings/deciles.csv",
        "workflow_report.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let again = tempfile::tempdir().unwrap();
    write_artifacts(again.path(), &runs).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("workflow_report.json")).unwrap(),
        std::fs::read(again.path().join("workflow_report.json")).unwrap()
    );
}

#[test]
fn rag_without_index_or_policy_is_refused() {
    let w = world();
    let input = &inputs(&w)[0];
    let mut deps = WorkflowDeps {
        reward: &w.reward,
        embedder: w.embedder.as_ref(),
        retriever: None,
        explainer: Some(&w.explainer),
        policy: Some(&w.policy),
        provider: &EchoProvider,
        templates: &w.templates,
        lexicon: &w.lexicon,
        settings: WorkflowSettings::default(),
    };
    let err = run_workflow(input, WorkflowMode::Rag, &deps).unwrap_err();
    assert_eq!(err.kind(), "index_missing");
    deps.retriever = Some(&w.index);
    deps.policy = None;
    assert_eq!(
        run_workflow(input, WorkflowMode::Rag, &deps).unwrap_err().kind(),
        "policy_missing"
    );
    assert!(run_workflow(input, WorkflowMode::RagNoRatings, &deps).is_ok());
}
