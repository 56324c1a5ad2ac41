//! `referral-forge.toml`: paths, encoder and provider choices, seeds and
//! thresholds. Every key has a default; relative paths resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use referral_forge::encoders::{EncoderKind, TfidfConfig};

pub const CONFIG_ENV: &str = "REFERRAL_FORGE_CONFIG";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub paths: PathsConfig,
    pub encoder: EncoderConfig,
    pub completion: CompletionConfig,
    pub train: TrainConfig,
    pub evaluate: EvaluateConfig,
    pub index: IndexSection,
    pub workflow: WorkflowSection,
    pub server: ServerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory with `posts.jsonl` and `comments.jsonl`.
    pub corpus: PathBuf,
    /// Working directory for every generated artifact.
    pub artifacts: PathBuf,
    /// Defaults to the bundled lexicon.
    pub lexicon: Option<PathBuf>,
    /// Defaults to the bundled feature schema.
    pub schema: Option<PathBuf>,
    /// Defaults to the bundled word list.
    pub dictionary: Option<PathBuf>,
    /// Template directory; bundled templates fill any gaps.
    pub prompts: Option<PathBuf>,
    /// Defaults to `<artifacts>/model.json`.
    pub model: Option<PathBuf>,
    /// Defaults to `<artifacts>/index`.
    pub index: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: "corpus".into(),
            artifacts: "artifacts".into(),
            lexicon: None,
            schema: None,
            dictionary: None,
            prompts: None,
            model: None,
            index: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Local deterministic hashing embedder.
    Hashing,
    /// Remote `POST /embed` service.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub embedding: EmbeddingSource,
    pub dim: usize,
    pub seed: u64,
    pub base_url: Option<String>,
    /// Whether the remote embedder serves `/embed_tokens`.
    pub token_embeddings: bool,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub tfidf: TfidfConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Embedding,
            embedding: EmbeddingSource::Hashing,
            dim: 256,
            seed: 0,
            base_url: None,
            token_embeddings: false,
            max_in_flight: 4,
            timeout_secs: 30,
            tfidf: TfidfConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    /// Returns the request unchanged.
    Echo,
    /// Returns the first retrieved example, or echoes without one.
    TopExample,
    /// Alias of `top-example`.
    Stub,
    /// Remote `POST /complete` service.
    Http,
}

impl std::str::FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "echo" => Ok(ProviderKind::Echo),
            "top-example" => Ok(ProviderKind::TopExample),
            "stub" => Ok(ProviderKind::Stub),
            "http" => Ok(ProviderKind::Http),
            other => Err(format!(
                "unknown provider {other:?} (expected echo, top-example, stub or http)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionConfig {
    pub provider: ProviderKind,
    pub base_url: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig {
            provider: ProviderKind::Stub,
            base_url: None,
            model: "gpt-5-mini".into(),
            temperature: 0.0,
            seed: None,
            max_in_flight: 4,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub folds: usize,
    pub grid_points: usize,
    pub seed: u64,
    /// Share of requests (by date) used for training when `split_date` is unset.
    pub train_fraction: f64,
    pub split_date: Option<NaiveDate>,
    pub max_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            folds: 5,
            grid_points: 12,
            seed: 0,
            train_fraction: 0.8,
            split_date: None,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub bootstrap: usize,
    pub alpha: f64,
    pub seed: u64,
    pub threshold: f64,
    pub calibration_bins: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            bootstrap: 1000,
            alpha: 0.05,
            seed: 0,
            threshold: 0.5,
            calibration_bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub trim_fraction: f64,
    pub keep_fraction: f64,
    pub seed: u64,
    pub max_iter: usize,
    pub min_entries: usize,
    pub ig_steps: usize,
}

impl Default for IndexSection {
    fn default() -> Self {
        let d = referral_forge::retriever::IndexConfig::default();
        IndexSection {
            trim_fraction: d.trim_fraction,
            keep_fraction: d.keep_fraction,
            seed: d.seed,
            max_iter: d.max_iter,
            min_entries: d.min_entries,
            ig_steps: referral_forge::explainer::DEFAULT_IG_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkflowSection {
    pub examples: usize,
    pub lowess_frac: f64,
    pub validation_retries: usize,
    pub transport_retries: usize,
    pub backoff_ms: u64,
    /// Optional cap on requests per batch-eval run, taken in id order.
    pub limit: Option<usize>,
}

impl Default for WorkflowSection {
    fn default() -> Self {
        WorkflowSection {
            examples: 5,
            lowess_frac: referral_forge::workflow::DEFAULT_LOWESS_FRAC,
            validation_retries: 2,
            transport_retries: 3,
            backoff_ms: 250,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    pub max_body_bytes: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1:8080".into(),
            max_body_bytes: 2 * 1024 * 1024,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl AppConfig {
    /// Parses TOML; relative paths are kept as written.
    pub fn from_toml(text: &str) -> Result<AppConfig> {
        toml::from_str(text).context("invalid config")
    }

    /// Reads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<AppConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = AppConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        resolve(base, &mut p.corpus);
        resolve(base, &mut p.artifacts);
        for o in [
            &mut p.lexicon,
            &mut p.schema,
            &mut p.dictionary,
            &mut p.prompts,
            &mut p.model,
            &mut p.index,
        ] {
            if let Some(v) = o {
                resolve(base, v);
            }
        }
    }

    pub fn model_path(&self) -> PathBuf {
        self.paths
            .model
            .clone()
            .unwrap_or_else(|| self.paths.artifacts.join("model.json"))
    }

    pub fn index_dir(&self) -> PathBuf {
        self.paths
            .index
            .clone()
            .unwrap_or_else(|| self.paths.artifacts.join("index"))
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.paths.artifacts.join(name)
    }

    /// Fails fast on referenced files that do not exist and on values
    /// outside their domain.
    pub fn validate(&self) -> Result<()> {
        let p = &self.paths;
        for (key, path) in [
            ("paths.lexicon", &p.lexicon),
            ("paths.schema", &p.schema),
            ("paths.dictionary", &p.dictionary),
        ] {
            if let Some(path) = path {
                if !path.is_file() {
                    bail!("{key}: {} does not exist", path.display());
                }
            }
        }
        if let Some(dir) = &p.prompts {
            if !dir.is_dir() {
                bail!("paths.prompts: {} is not a directory", dir.display());
            }
        }
        if self.train.folds < 2 {
            bail!("train.folds must be at least 2");
        }
        if !(self.train.train_fraction > 0.0 && self.train.train_fraction < 1.0) {
            bail!("train.train_fraction must lie in (0, 1)");
        }
        if self.evaluate.bootstrap < 100 {
            bail!("evaluate.bootstrap must be at least 100");
        }
        if !(self.workflow.lowess_frac > 0.0 && self.workflow.lowess_frac <= 1.0) {
            bail!("workflow.lowess_frac must lie in (0, 1]");
        }
        if self.workflow.examples == 0 || self.workflow.examples > referral_forge::improver::MAX_EXAMPLES {
            bail!(
                "workflow.examples must lie in 1..={}",
                referral_forge::improver::MAX_EXAMPLES
            );
        }
        if self.encoder.embedding == EmbeddingSource::Http && self.encoder.base_url.is_none() {
            bail!("encoder.base_url is required for the http embedder");
        }
        if self.completion.provider == ProviderKind::Http && self.completion.base_url.is_none() {
            bail!("completion.base_url is required for the http provider");
        }
        Ok(())
    }

    /// Every key with its default, as TOML.
    pub fn default_toml() -> String {
        toml::to_string_pretty(&AppConfig::default()).expect("defaults serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = AppConfig::default_toml();
        assert_eq!(AppConfig::from_toml(&text).unwrap(), AppConfig::default());
        assert_eq!(AppConfig::from_toml("").unwrap(), AppConfig::default());
    }

    #[test]
    fn partial_sections_and_unknown_keys() {
        let cfg = AppConfig::from_toml("[train]\nfolds = 3\n[completion]\nprovider = \"echo\"\n").unwrap();
        assert_eq!(cfg.train.folds, 3);
        assert_eq!(cfg.train.grid_points, 12);
        assert_eq!(cfg.completion.provider, ProviderKind::Echo);
        assert!(AppConfig::from_toml("[train]\nfoldz = 3\n").is_err());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rf.toml");
        std::fs::write(&path, "[paths]\nartifacts = \"out\"\nmodel = \"/abs/model.json\"\n").unwrap();
        let cfg = AppConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.artifacts, dir.path().join("out"));
        assert_eq!(cfg.model_path(), PathBuf::from("/abs/model.json"));
        assert_eq!(cfg.index_dir(), dir.path().join("out").join("index"));
    }

    #[test]
    fn validation_fails_fast() {
        let mut cfg = AppConfig::default();
        cfg.validate().unwrap();
        cfg.paths.lexicon = Some("/nonexistent/lexicon.json".into());
        assert!(cfg.validate().unwrap_err().to_string().contains("paths.lexicon"));
        let mut cfg = AppConfig::default();
        cfg.completion.provider = ProviderKind::Http;
        assert!(cfg.validate().is_err());
    }
}
