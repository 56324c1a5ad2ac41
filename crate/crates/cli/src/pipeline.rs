//! The artifact pipeline behind each subcommand: ingest, train, evaluate,
//! index and batch evaluation, plus the loaded runtime shared with the
//! service.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use referral_forge::corpus::{
    label_and_assemble, split_by_date, threshold_for_fraction, Comment, DatasetSplit, Lexicon, Post, ReferralRequest,
};
use referral_forge::encoders::{
    EmbeddingProvider, Encoder, EncoderKind, HashingEmbedder, HttpEmbeddingConfig, HttpEmbeddingProvider,
    TfidfVocabulary,
};
use referral_forge::explainer::{AttributionReport, Explainer, RatingPolicy};
use referral_forge::features::{Dictionary, FeatureSchema};
use referral_forge::improver::{
    CompletionProvider, EchoProvider, HttpCompletionConfig, HttpCompletionProvider, PromptTemplates, RetryPolicy,
    TopExampleProvider,
};
use referral_forge::io::{read_json, read_jsonl, write_json, write_jsonl, ArtifactError};
use referral_forge::metrics::{
    calibration_bins, distribution_stats, evaluate as evaluate_metrics, random_baseline, BootstrapConfig, MetricsTable,
};
use referral_forge::model::{default_grid, grid_search_cv, train_l1, CvReport, FitOptions, LogisticModel};
use referral_forge::retriever::{prepare_candidates, IndexConfig, RetrievalIndex, INDEX_BIN};
use referral_forge::reward::RewardModel;
use referral_forge::workflow::{
    analyze, run_batch, run_workflow, write_artifacts, ComparisonTable, RevisionOutcome, WorkflowDeps, WorkflowInput,
    WorkflowMode, WorkflowSettings,
};

use crate::config::{AppConfig, EmbeddingSource, ProviderKind};

pub const REQUESTS_FILE: &str = "requests.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const TFIDF_FILE: &str = "tfidf_vocab.json";
pub const CV_REPORT_FILE: &str = "cv_report.json";
pub const METRICS_FILE: &str = "metrics_report.json";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const PROB_STATS_FILE: &str = "prob_stats.json";
pub const POLICY_FILE: &str = "rating_policy.json";
pub const RATINGS_FILE: &str = "ratings.jsonl";
pub const REPORTS_DIR: &str = "reports";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn missing(what: &str, path: &Path, step: &str) -> anyhow::Error {
    anyhow!(
        "{what} not found at {}; run `referral-forge {step}` first",
        path.display()
    )
}

pub fn lexicon(cfg: &AppConfig) -> Result<Lexicon> {
    match &cfg.paths.lexicon {
        Some(p) => Lexicon::load(p).with_context(|| format!("loading lexicon {}", p.display())),
        None => Ok(Lexicon::new(Default::default())?),
    }
}

pub fn templates(cfg: &AppConfig) -> Result<PromptTemplates> {
    match &cfg.paths.prompts {
        Some(dir) => Ok(PromptTemplates::load_dir(dir)?),
        None => Ok(PromptTemplates::default()),
    }
}

/// The embedder used for retrieval, and for the reward model when the
/// encoder kind is `embedding`.
pub fn embedder(cfg: &AppConfig) -> Arc<dyn EmbeddingProvider> {
    let e = &cfg.encoder;
    match e.embedding {
        EmbeddingSource::Hashing => Arc::new(HashingEmbedder::new(e.dim, e.seed)),
        EmbeddingSource::Http => Arc::new(HttpEmbeddingProvider::new(HttpEmbeddingConfig {
            base_url: e.base_url.clone().unwrap_or_default(),
            dimension: e.dim,
            token_embeddings: e.token_embeddings,
            max_in_flight: e.max_in_flight,
            timeout_secs: e.timeout_secs,
        })),
    }
}

pub fn provider(cfg: &AppConfig) -> Arc<dyn CompletionProvider> {
    let c = &cfg.completion;
    match c.provider {
        ProviderKind::Echo => Arc::new(EchoProvider),
        ProviderKind::TopExample | ProviderKind::Stub => Arc::new(TopExampleProvider),
        ProviderKind::Http => Arc::new(HttpCompletionProvider::new(HttpCompletionConfig {
            base_url: c.base_url.clone().unwrap_or_default(),
            max_in_flight: c.max_in_flight,
            timeout_secs: c.timeout_secs,
        })),
    }
}

fn featurized(cfg: &AppConfig) -> Result<Encoder> {
    let schema = match &cfg.paths.schema {
        Some(p) => FeatureSchema::load(p)?,
        None => FeatureSchema::default(),
    };
    let dictionary = match &cfg.paths.dictionary {
        Some(p) => Dictionary::load(p)?,
        None => Dictionary::default(),
    };
    Ok(Encoder::Featurized { schema, dictionary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub posts: usize,
    pub comments: usize,
    pub requests: usize,
    pub positives: usize,
    pub dangling_comments: usize,
    pub threshold_date: chrono::NaiveDate,
    pub train: usize,
    pub test: usize,
    pub train_base_rate: f64,
}

/// Reads `posts.jsonl` and `comments.jsonl`, writes `requests.jsonl` and
/// `split.json`.
pub fn ingest(cfg: &AppConfig) -> Result<IngestSummary> {
    let posts: Vec<Post> = read_jsonl(&cfg.paths.corpus.join("posts.jsonl"))?;
    let comments: Vec<Comment> = read_jsonl(&cfg.paths.corpus.join("comments.jsonl"))?;
    let lex = lexicon(cfg)?;
    let assembled = label_and_assemble(&posts, &comments, &lex)?;
    let requests = assembled.requests;
    let threshold = match cfg.train.split_date {
        Some(d) => d,
        None => threshold_for_fraction(&requests, cfg.train.train_fraction)?,
    };
    let split = split_by_date(&requests, threshold)?;
    create_dir(&cfg.paths.artifacts)?;
    write_jsonl(&cfg.artifact(REQUESTS_FILE), &requests)?;
    write_json(&cfg.artifact(SPLIT_FILE), &split)?;
    Ok(IngestSummary {
        posts: posts.len(),
        comments: comments.len(),
        requests: requests.len(),
        positives: requests.iter().filter(|r| r.label).count(),
        dangling_comments: assembled.dangling_comments,
        threshold_date: split.threshold_date,
        train: split.train_ids.len(),
        test: split.test_ids.len(),
        train_base_rate: split.train_base_rate,
    })
}

/// Ingested requests and their split.
pub struct Corpus {
    pub requests: Vec<ReferralRequest>,
    pub split: DatasetSplit,
}

impl Corpus {
    pub fn load(cfg: &AppConfig) -> Result<Corpus> {
        let path = cfg.artifact(REQUESTS_FILE);
        let requests = match read_jsonl(&path) {
            Err(ArtifactError::NotFound { .. }) => return Err(missing("requests artifact", &path, "ingest")),
            r => r?,
        };
        let split = read_json(&cfg.artifact(SPLIT_FILE))?;
        Ok(Corpus { requests, split })
    }

    pub fn train(&self) -> Vec<&ReferralRequest> {
        self.split.partition(&self.requests).0
    }

    pub fn test(&self) -> Vec<&ReferralRequest> {
        self.split.partition(&self.requests).1
    }
}

fn pairs<'a>(rs: &[&'a ReferralRequest]) -> Vec<(&'a str, &'a str)> {
    rs.iter()
        .map(|r| (r.masked_title.as_str(), r.masked_body.as_str()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub encoder_id: String,
    pub train: usize,
    pub selected_lambda: f64,
    pub cv_auroc: f64,
    pub nonzero_weights: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits the encoder (TF-IDF only), cross-validates the L1 penalty and fits
/// the final head on all training requests.
pub fn train(cfg: &AppConfig) -> Result<TrainSummary> {
    let corpus = Corpus::load(cfg)?;
    let train = corpus.train();
    let pairs = pairs(&train);
    let encoder = match cfg.encoder.kind {
        EncoderKind::Tfidf => {
            let docs: Vec<String> = train.iter().map(|r| r.text()).collect();
            let vocab = TfidfVocabulary::fit(&docs, cfg.encoder.tfidf.clone())?;
            write_json(&cfg.artifact(TFIDF_FILE), &vocab)?;
            Encoder::Tfidf(vocab)
        }
        EncoderKind::Embedding => Encoder::Embedding(embedder(cfg)),
        EncoderKind::Featurized => featurized(cfg)?,
    };
    let x = encoder.encode_all(&pairs)?;
    let y: Vec<bool> = train.iter().map(|r| r.label).collect();
    let opts = FitOptions {
        max_iter: cfg.train.max_iter,
        ..Default::default()
    };
    let grid = default_grid(&x, &y, cfg.train.grid_points);
    let cv: CvReport = grid_search_cv(&x, &y, &grid, cfg.train.folds, cfg.train.seed, &opts)?;
    let fit = train_l1(&x, &y, cv.selected_lambda, &opts)?;
    let trace = fit.trace.clone();
    let model = fit.into_model(encoder.id(), encoder.version());
    if let Some(parent) = cfg.model_path().parent() {
        create_dir(parent)?;
    }
    model.save(&cfg.model_path())?;
    write_json(&cfg.artifact(CV_REPORT_FILE), &cv)?;
    Ok(TrainSummary {
        encoder_id: model.encoder_id.clone(),
        train: train.len(),
        selected_lambda: cv.selected_lambda,
        cv_auroc: cv.mean_auroc[cv.selected_index],
        nonzero_weights: model.nonzero_weights(),
        iterations: trace.iterations,
        converged: trace.converged,
    })
}

/// Loads `model.json` and rebuilds the encoder it was trained with.
pub fn load_reward(cfg: &AppConfig) -> Result<RewardModel> {
    let path = cfg.model_path();
    if !path.is_file() {
        return Err(missing("model artifact", &path, "train"));
    }
    let model = LogisticModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let encoder = if model.encoder_id == "tfidf" {
        let vocab_path = cfg.artifact(TFIDF_FILE);
        let mut vocab: TfidfVocabulary = read_json(&vocab_path).map_err(|e| match e {
            ArtifactError::NotFound { path } => missing("TF-IDF vocabulary", &path, "train"),
            e => e.into(),
        })?;
        vocab.rebuild_index();
        Encoder::Tfidf(vocab)
    } else if model.encoder_id == "featurized" {
        featurized(cfg)?
    } else {
        Encoder::Embedding(embedder(cfg))
    };
    RewardModel::new(model, encoder)
        .with_context(|| format!("model {} does not match the configured encoder", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub test: usize,
    pub auroc: f64,
    pub table: Vec<Vec<String>>,
}

/// Writes `metrics_report.json`, `calibration.csv` and `prob_stats.json`
/// for the test split.
pub fn evaluate(cfg: &AppConfig) -> Result<EvaluateSummary> {
    let reward = load_reward(cfg)?;
    let corpus = Corpus::load(cfg)?;
    let test = corpus.test();
    let scores = reward.score_many(&pairs(&test))?;
    let labels: Vec<bool> = test.iter().map(|r| r.label).collect();
    let e = &cfg.evaluate;
    let boot = BootstrapConfig {
        resamples: e.bootstrap,
        alpha: e.alpha,
        seed: e.seed,
        threshold: e.threshold,
    };
    let name = format!("Reward Model ({})", reward.model().encoder_id);
    let report = evaluate_metrics(&name, &scores, &labels, &boot)?;
    let baseline = random_baseline(&labels, corpus.split.train_base_rate, e.seed, &boot)?;
    let auroc = report.auroc.value;
    let table = MetricsTable::new(boot, vec![report, baseline]);
    table.save(&cfg.artifact(METRICS_FILE))?;
    calibration_bins(&scores, &labels, e.calibration_bins)?.save_csv(&cfg.artifact(CALIBRATION_FILE))?;
    distribution_stats(&scores)?.save(&cfg.artifact(PROB_STATS_FILE))?;
    Ok(EvaluateSummary {
        test: test.len(),
        auroc,
        table: table.rendered.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub candidates: usize,
    pub after_trim: usize,
    pub entries: usize,
    pub clusters: usize,
    pub p_max: f64,
    pub policy_weak_max: f64,
    pub policy_strong_min: f64,
}

pub fn index_config(cfg: &AppConfig) -> IndexConfig {
    let s = &cfg.index;
    IndexConfig {
        trim_fraction: s.trim_fraction,
        keep_fraction: s.keep_fraction,
        seed: s.seed,
        max_iter: s.max_iter,
        min_entries: s.min_entries,
    }
}

/// Calibrates the rating policy on training requests, builds the example
/// index from successful training requests and rates every entry.
pub fn index(cfg: &AppConfig) -> Result<IndexSummary> {
    let reward = Arc::new(load_reward(cfg)?);
    let corpus = Corpus::load(cfg)?;
    let train = corpus.train();
    let embedder = embedder(cfg);
    let explainer = Explainer::new(reward.clone(), cfg.index.ig_steps);
    let policy = explainer.calibrate_policy(&pairs(&train))?;

    let candidates = prepare_candidates(&train, &reward, embedder.as_ref())?;
    let n = candidates.len();
    let mut idx = RetrievalIndex::build(
        candidates,
        &index_config(cfg),
        embedder.name(),
        &reward.model().encoder_id,
    )?;
    let reports = idx
        .entries
        .iter()
        .map(|e| {
            Ok(explainer
                .attribute(&e.title, &e.body)?
                .into_report(Some(e.id.clone()), &policy))
        })
        .collect::<Result<Vec<AttributionReport>>>()?;
    let ratings: HashMap<String, _> = reports
        .iter()
        .map(|r| (r.id.clone().expect("id set above"), r.ratings.clone()))
        .collect();
    let missing_ratings = idx.attach_ratings(&ratings);
    if !missing_ratings.is_empty() {
        bail!("{} index entries have no ratings", missing_ratings.len());
    }

    let dir = cfg.index_dir();
    create_dir(&dir)?;
    idx.save(&dir)?;
    policy.save(&dir.join(POLICY_FILE))?;
    write_jsonl(&dir.join(RATINGS_FILE), &reports)?;
    Ok(IndexSummary {
        candidates: n,
        after_trim: idx.meta.after_trim,
        entries: idx.len(),
        clusters: idx.meta.clusters,
        p_max: idx.p_max(),
        policy_weak_max: policy.weak_max,
        policy_strong_min: policy.strong_min,
    })
}

/// Loaded, immutable artifacts shared by the service and the single-shot
/// subcommands.
pub struct Runtime {
    pub config: AppConfig,
    pub reward: Arc<RewardModel>,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub index: Option<RetrievalIndex>,
    pub policy: Option<RatingPolicy>,
    pub explainer: Explainer,
    pub provider: Arc<dyn CompletionProvider>,
    pub templates: PromptTemplates,
    pub lexicon: Lexicon,
}

impl Runtime {
    /// The model is required; the index and policy are loaded when present.
    pub fn load(cfg: &AppConfig) -> Result<Runtime> {
        cfg.validate()?;
        let reward = Arc::new(load_reward(cfg)?);
        let embedder = embedder(cfg);
        let dir = cfg.index_dir();
        let index = if dir.join(INDEX_BIN).is_file() {
            let idx = RetrievalIndex::load(&dir).with_context(|| format!("loading index {}", dir.display()))?;
            if idx.meta.embedder != embedder.name() {
                bail!(
                    "index {} was built with embedder {:?}, configured embedder is {:?}",
                    dir.display(),
                    idx.meta.embedder,
                    embedder.name()
                );
            }
            Some(idx)
        } else {
            log::info!("no index at {}; retrieval workflows are unavailable", dir.display());
            None
        };
        let policy_path = dir.join(POLICY_FILE);
        let policy = if policy_path.is_file() {
            Some(RatingPolicy::load(&policy_path)?)
        } else {
            None
        };
        Ok(Runtime {
            explainer: Explainer::new(reward.clone(), cfg.index.ig_steps),
            reward,
            embedder,
            index,
            policy,
            provider: provider(cfg),
            templates: templates(cfg)?,
            lexicon: lexicon(cfg)?,
            config: cfg.clone(),
        })
    }

    pub fn settings(&self) -> WorkflowSettings {
        let c = &self.config;
        WorkflowSettings {
            model: c.completion.model.clone(),
            temperature: c.completion.temperature,
            seed: c.completion.seed,
            examples: c.workflow.examples,
            retry: RetryPolicy {
                validation_retries: c.workflow.validation_retries,
                transport_retries: c.workflow.transport_retries,
                backoff_ms: c.workflow.backoff_ms,
            },
        }
    }

    pub fn deps(&self) -> WorkflowDeps<'_> {
        WorkflowDeps {
            reward: &self.reward,
            embedder: self.embedder.as_ref(),
            retriever: self
                .index
                .as_ref()
                .map(|i| i as &dyn referral_forge::retriever::Retriever),
            explainer: Some(&self.explainer),
            policy: self.policy.as_ref(),
            provider: self.provider.as_ref(),
            templates: &self.templates,
            lexicon: &self.lexicon,
            settings: self.settings(),
        }
    }

    pub fn explain(&self, title: &str, body: &str) -> Result<AttributionReport> {
        let policy = self
            .policy
            .as_ref()
            .ok_or_else(|| missing("rating policy", &self.config.index_dir().join(POLICY_FILE), "index"))?;
        Ok(self.explainer.explain(title, body, policy)?)
    }

    pub fn revise(&self, id: &str, title: &str, body: &str, mode: WorkflowMode) -> Result<RevisionOutcome> {
        let input = WorkflowInput {
            id: id.into(),
            title: title.into(),
            content: body.into(),
        };
        Ok(run_workflow(&input, mode, &self.deps())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub output: PathBuf,
    pub requests: usize,
    pub table: Vec<Vec<String>>,
    pub failed: Vec<(WorkflowMode, usize)>,
}

/// Revises every test request under each mode and writes the comparison
/// table, outcomes, smoothed curves and decile shares to `<artifacts>/reports`.
pub fn batch_eval(cfg: &AppConfig, modes: &[WorkflowMode]) -> Result<BatchSummary> {
    if modes.is_empty() {
        bail!("no workflow modes selected");
    }
    let rt = Runtime::load(cfg)?;
    let corpus = Corpus::load(cfg)?;
    let mut test = corpus.test();
    test.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(limit) = cfg.workflow.limit {
        test.truncate(limit);
    }
    let inputs: Vec<WorkflowInput> = test
        .iter()
        .map(|r| WorkflowInput {
            id: r.id.clone(),
            title: r.masked_title.clone(),
            content: r.masked_body.clone(),
        })
        .collect();
    let deps = rt.deps();
    let mut runs = Vec::with_capacity(modes.len());
    for &mode in modes {
        let batch = run_batch(&inputs, mode, &deps)?;
        log::info!(
            "{}: {} revised, {} failed",
            mode.as_str(),
            batch.outcomes.len(),
            batch.failures.len()
        );
        runs.push(analyze(batch, cfg.workflow.lowess_frac)?);
    }
    let out = cfg.artifact(REPORTS_DIR);
    let table: ComparisonTable = write_artifacts(&out, &runs)?;
    Ok(BatchSummary {
        output: out,
        requests: inputs.len(),
        table: table
            .rows
            .iter()
            .map(|r| std::iter::once(r.revision_type.clone()).chain(r.rendered()).collect())
            .collect(),
        failed: runs.iter().map(|r| (r.report.workflow, r.report.failed)).collect(),
    })
}
