//! `mhattnsurv`: command-line front end for synthetic data generation,
//! training, evaluation, nested cross-validation, head-count ablation,
//! attention maps and background patch filtering.
//!
//! Failures print one JSON object on one line to stderr, for example
//! `{"error":"config","message":"unknown keys: train.lr"}`, and exit with
//! status 2 for invalid invocations or configs and 1 otherwise.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mhattnsurv::Error;

#[derive(Parser)]
#[command(name = "mhattnsurv", version, about = "Multi-head attention MIL survival models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-signal cohort.
    Synth(Common),
    /// Train one model with early stopping on a stratified validation fold.
    Train(Common),
    /// Score patients and report c-index, IPCW AUC, tertile KM curves and log-rank.
    Eval(Common),
    /// Nested cross-validation with a dropout-rate grid.
    Cv(Common),
    /// Nested cross-validation for each head count on shared folds.
    Ablate(Common),
    /// Per-head attention maps of one slide.
    Attnmap(Common),
    /// Flag background patches by purple-pixel count.
    FilterPatches(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bit-identical outputs across runs.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message.replace('\n', " ") }).to_string()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> mhattnsurv::Result<()> {
    let common = match &cli.command {
        Command::Synth(c)
        | Command::Train(c)
        | Command::Eval(c)
        | Command::Cv(c)
        | Command::Ablate(c)
        | Command::Attnmap(c)
        | Command::FilterPatches(c) => c,
    };
    if let Some(threads) = common.threads {
        if threads == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth(c) => commands::synth(c),
        Command::Train(c) => commands::train(c),
        Command::Eval(c) => commands::eval(c),
        Command::Cv(c) => commands::cv(c),
        Command::Ablate(c) => commands::ablate(c),
        Command::Attnmap(c) => commands::attnmap(c),
        Command::FilterPatches(c) => commands::filter_patches(c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!("{}", error_line("usage", first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}
