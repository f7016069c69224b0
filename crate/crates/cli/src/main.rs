//! `selsearch`: synthesize or load a corpus, featurize it, train the
//! sharding and routing towers, and evaluate them against baselines.
//!
//! Exit status is 0 on success, 1 on runtime failure and 2 on a usage or
//! configuration error. `THREADS` caps the worker pool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use selsearch_core::baselines::Method;
use selsearch_core::par;
use selsearch_core::trainer::Variant;
use toml::Value;

use config::{parse_override, PipelineConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<selsearch_core::Error> for CliError {
    fn from(e: selsearch_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "selsearch", version, about = "Co-trained document sharding and query routing")]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set train.beta=3`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true, value_parser = parse_override)]
    overrides: Vec<(String, Value)>,
    /// Directory that relative artifact paths resolve against.
    #[arg(long, global = true)]
    dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-cluster corpus.
    Synth {
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Build the vocabulary from documents and training queries.
    Vocab,
    /// Write TF-IDF vectors for every query and document.
    Featurize,
    /// Train the towers; writes the checkpoint and the training log.
    Train {
        #[arg(long)]
        variant: Option<Variant>,
        /// One network for both queries and documents.
        #[arg(long)]
        share_towers: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Assign every document to its most probable shard.
    Shard,
    /// Rank shards for every query.
    Route {
        /// Shards listed per query; defaults to all of them.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Coverage and cost of the trained shard map and routing on the test split.
    Eval {
        /// Report name; defaults to the variant.
        #[arg(long)]
        name: Option<String>,
    },
    /// Fit and evaluate a baseline over every seed in `runs`.
    Baseline {
        #[arg(long)]
        method: Method,
    },
    /// Print all reports and write plotdata.csv.
    Report,
}

fn set(overrides: &mut Vec<(String, Value)>, key: &str, value: impl Into<Value>) {
    overrides.push((key.to_string(), value.into()));
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Ok(threads) = std::env::var("THREADS") {
        let n: usize = threads
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("THREADS must be a positive integer, got `{threads}`")))?;
        par::init_threads(n);
    }
    let mut overrides = cli.overrides;
    if let Some(dir) = &cli.dir {
        set(&mut overrides, "paths.root", dir.display().to_string());
    }
    match &cli.command {
        Command::Synth { groups, seed, noise } => {
            if let Some(g) = groups {
                set(&mut overrides, "synth.n_groups", *g as i64);
            }
            if let Some(s) = seed {
                set(&mut overrides, "synth.seed", *s as i64);
            }
            if let Some(r) = noise {
                set(&mut overrides, "synth.noise_rate", *r);
            }
        }
        Command::Train {
            variant,
            share_towers,
            seed,
        } => {
            if let Some(v) = variant {
                set(&mut overrides, "train.variant", v.to_string());
            }
            if *share_towers {
                set(&mut overrides, "train.share_towers", true);
            }
            if let Some(s) = seed {
                set(&mut overrides, "train.seed", *s as i64);
            }
        }
        _ => {}
    }
    let config = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth { .. } => commands::synth(&config),
        Command::Vocab => commands::vocab(&config),
        Command::Featurize => commands::featurize(&config),
        Command::Train { .. } => commands::train(&config),
        Command::Shard => commands::shard(&config),
        Command::Route { top } => commands::route(&config, top),
        Command::Eval { name } => commands::eval(&config, name),
        Command::Baseline { method } => commands::baseline(&config, method),
        Command::Report => commands::report(&config),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
