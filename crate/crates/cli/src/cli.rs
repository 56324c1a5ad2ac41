//! Argument parsing and subcommand dispatch.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use referral_forge::fixture::{generate, FixtureConfig};
use referral_forge::workflow::WorkflowMode;

use crate::config::{AppConfig, ProviderKind, CONFIG_ENV};
use crate::pipeline::{self, Runtime};

#[derive(Debug, Parser)]
#[command(
    name = "referral-forge",
    version,
    about = "Score, explain and revise job-referral requests"
)]
pub struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Overrides `paths.artifacts`.
    #[arg(long, global = true)]
    pub artifacts: Option<PathBuf>,
    /// Overrides `paths.corpus`.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic corpus with a planted signal.
    GenFixture {
        /// Output directory; defaults to the corpus path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1200)]
        requests: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Identifies requests, labels and masks them, and splits by date.
    Ingest,
    /// Fits the reward model with cross-validated L1 penalty.
    Train {
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        grid_points: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Scores the test split and writes metrics with bootstrap intervals.
    Evaluate {
        #[arg(long)]
        bootstrap: Option<usize>,
    },
    /// Builds the example index and rating policy.
    Index,
    /// Prints sentence attributions and ratings for one request.
    Explain {
        #[arg(long)]
        title: String,
        #[arg(long, default_value = "")]
        body: String,
    },
    /// Revises one request.
    Revise {
        #[arg(long, default_value = "basic")]
        mode: String,
        #[arg(long)]
        title: String,
        #[arg(long, default_value = "")]
        body: String,
        #[arg(long)]
        provider: Option<ProviderKind>,
    },
    /// Revises the test split under each workflow and writes the comparison report.
    BatchEval {
        /// `basic`, `rag`, `rag_no_ratings` or `all`; repeatable.
        #[arg(long = "mode", default_value = "all")]
        modes: Vec<String>,
        #[arg(long)]
        provider: Option<ProviderKind>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        lowess_frac: Option<f64>,
    },
    /// Serves the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Prints the effective configuration as TOML.
    PrintConfig,
}

pub fn parse_modes(raw: &[String]) -> Result<Vec<WorkflowMode>> {
    let mut modes = Vec::new();
    for m in raw {
        if m == "all" {
            modes.extend(WorkflowMode::ALL);
            continue;
        }
        match WorkflowMode::parse(m) {
            Some(mode) => modes.push(mode),
            None => bail!("unknown mode {m:?} (expected basic, rag, rag_no_ratings or all)"),
        }
    }
    let mut seen = Vec::new();
    modes.retain(|m| {
        let fresh = !seen.contains(m);
        seen.push(*m);
        fresh
    });
    Ok(modes)
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    if let Some(a) = &cli.artifacts {
        cfg.paths.artifacts = a.clone();
    }
    if let Some(c) = &cli.corpus {
        cfg.paths.corpus = c.clone();
    }
    Ok(cfg)
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenFixture { out, requests, seed } => {
            let dir = out.unwrap_or_else(|| cfg.paths.corpus.clone());
            let fx = generate(&FixtureConfig {
                requests,
                seed,
                ..Default::default()
            });
            fx.write(&dir)?;
            print(&serde_json::json!({
                "output": dir,
                "posts": fx.posts.len(),
                "comments": fx.comments.len(),
            }))
        }
        Command::Ingest => print(&pipeline::ingest(&cfg)?),
        Command::Train {
            folds,
            grid_points,
            seed,
        } => {
            if let Some(f) = folds {
                cfg.train.folds = f;
            }
            if let Some(g) = grid_points {
                cfg.train.grid_points = g;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            print(&pipeline::train(&cfg)?)
        }
        Command::Evaluate { bootstrap } => {
            if let Some(b) = bootstrap {
                cfg.evaluate.bootstrap = b;
            }
            let summary = pipeline::evaluate(&cfg)?;
            for row in &summary.table {
                eprintln!("{}", row.join("  "));
            }
            print(&summary)
        }
        Command::Index => print(&pipeline::index(&cfg)?),
        Command::Explain { title, body } => print(&Runtime::load(&cfg)?.explain(&title, &body)?),
        Command::Revise {
            mode,
            title,
            body,
            provider,
        } => {
            let mode = parse_modes(&[mode])?;
            let [mode] = mode[..] else {
                bail!("revise takes exactly one mode")
            };
            if let Some(p) = provider {
                cfg.completion.provider = p;
            }
            print(&Runtime::load(&cfg)?.revise("draft", &title, &body, mode)?)
        }
        Command::BatchEval {
            modes,
            provider,
            limit,
            lowess_frac,
        } => {
            let modes = parse_modes(&modes)?;
            if let Some(p) = provider {
                cfg.completion.provider = p;
            }
            if limit.is_some() {
                cfg.workflow.limit = limit;
            }
            if let Some(f) = lowess_frac {
                cfg.workflow.lowess_frac = f;
            }
            let summary = pipeline::batch_eval(&cfg, &modes)?;
            for row in &summary.table {
                eprintln!("{}", row.join("  "));
            }
            print(&summary)
        }
        Command::Serve { bind } => {
            let bind = bind.unwrap_or_else(|| cfg.server.bind.clone());
            let rt = Arc::new(Runtime::load(&cfg)?);
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .context("starting the async runtime")?
                .block_on(crate::server::serve(rt, &bind))
        }
        Command::PrintConfig => {
            print!("{}", toml::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}

/// Parses the process arguments, runs, and maps errors to exit code 1.
/// Usage errors exit with 2 from the parser.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_expand_and_dedupe() {
        let m = parse_modes(&["rag".into(), "all".into()]).unwrap();
        assert_eq!(m, [WorkflowMode::Rag, WorkflowMode::Basic, WorkflowMode::RagNoRatings]);
        assert!(parse_modes(&["fancy".into()]).is_err());
    }

    #[test]
    fn global_flags_parse_after_subcommand() {
        let cli = Cli::try_parse_from(["referral-forge", "batch-eval", "--mode", "rag", "--artifacts", "out"]).unwrap();
        assert_eq!(cli.artifacts, Some(PathBuf::from("out")));
        assert!(Cli::try_parse_from(["referral-forge", "train", "--bogus"]).is_err());
    }
}
