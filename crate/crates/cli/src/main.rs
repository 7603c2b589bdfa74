mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nvl_core::eval::Condition;
use nvl_core::models::Stage;
use nvl_core::trainer::System;

/// Noise-robust speaker verification with a perceptually trained enhancement
/// front end.
#[derive(Debug, Parser)]
#[command(name = "nvl", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Global {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every random stream; overrides the config file.
    #[arg(long, global = true, env = "NVL_SEED")]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint of the previous stage (required for pretrain2 and finetune).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Ablation system for pretrain2 (a, b, c, d) or finetune (d).
        #[arg(long, value_parser = parse_system)]
        ablation: Option<System>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trials and write EER/minDCF.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Trial list; generated from the corpus when omitted.
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Restrict to one condition; both by default.
        #[arg(long, value_parser = parse_condition)]
        condition: Option<Condition>,
        /// Bypass the enhancer even if the checkpoint has one.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the speaker embedding of one WAV file.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        baseline: bool,
        /// Skip voice activity detection.
        #[arg(long)]
        no_vad: bool,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the baseline and ablation systems end to end.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated subset of a,b,c,d.
        #[arg(long, value_delimiter = ',', value_parser = parse_system, default_value = "a,b,c,d")]
        systems: Vec<System>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize one or more reports (e.g. one per seed) as mean EER/minDCF.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: nvl_core::Error| e.to_string())
}

fn parse_system(s: &str) -> Result<System, String> {
    s.parse().map_err(|e: nvl_core::Error| e.to_string())
}

fn parse_condition(s: &str) -> Result<Condition, String> {
    s.parse().map_err(|e: nvl_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(commands::EXIT_VALIDATION);
        }
    };
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code)
        }
    }
}
