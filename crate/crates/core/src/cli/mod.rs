//! Command-line entry point.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::search::SearchMethod;
use config::{load_config, CliOverrides};

#[derive(Debug, Parser)]
#[command(name = "smpq", version, about = "Shapley-guided mixed-precision quantization search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub method: Option<MethodArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Smpq,
    Dmpq,
}

impl From<MethodArg> for SearchMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Smpq => SearchMethod::Smpq,
            MethodArg::Dmpq => SearchMethod::Dmpq,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search a policy and write policy, trajectory, Shapley dumps and checkpoint.
    Search,
    /// Fine-tune a searched policy from the supernet checkpoint.
    Finetune {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a policy on a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Exact Shapley values by enumeration (at most 20 players).
    ShapleyExact,
    /// Diagnostic experiments.
    Analyze {
        #[command(subcommand)]
        which: Analyze,
    },
}

#[derive(Debug, Subcommand)]
pub enum Analyze {
    Correlation,
    Pitfall {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    Interaction {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
}

pub fn execute(cli: &Cli) -> Result<serde_json::Value> {
    let overrides = CliOverrides {
        seed: cli.seed,
        out_dir: cli.out.clone(),
        threads: cli.threads,
        method: cli.method.map(Into::into),
    };
    let cfg = load_config(cli.config.as_deref(), std::env::vars(), &overrides)?;
    match &cli.command {
        Command::Search => commands::cmd_search(&cfg),
        Command::Finetune { policy, checkpoint } => commands::cmd_finetune(&cfg, policy.as_deref(), checkpoint.as_deref()),
        Command::Eval { checkpoint, policy } => commands::cmd_eval(&cfg, checkpoint.as_deref(), policy.as_deref()),
        Command::ShapleyExact => commands::cmd_shapley_exact(&cfg),
        Command::Analyze { which } => match which {
            Analyze::Correlation => commands::cmd_correlation(&cfg),
            Analyze::Pitfall { checkpoint } => commands::cmd_pitfall(&cfg, checkpoint.as_deref()),
            Analyze::Interaction { checkpoint, policy } => {
                commands::cmd_interaction(&cfg, checkpoint.as_deref(), policy.as_deref())
            }
        },
    }
}

/// Error report printed to stderr as one JSON line.
pub fn error_json(e: &Error) -> serde_json::Value {
    serde_json::json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": e.exit_code(),
    })
}

/// Runs the parsed command, prints its summary or error, returns the exit code.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("summary serializes"));
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            e.exit_code()
        }
    }
}
