use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lmort_core::tuner::ConnectionMode;
use lmort_core::{Error, Result};

mod commands;
mod manifest;

use manifest::Manifest;

/// Layer selection, tuner training and retrieval evaluation over cached
/// backbone hidden states.
#[derive(Debug, Parser)]
#[command(name = "lmort", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// TOML manifest; command-line flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Seed for the command's own randomness: task generation for emulate,
    /// pair sampling for analyze, init and shuffling for train and ablate.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Which selected layer feeds self attention.
    #[arg(long, global = true, value_parser = parse_connection)]
    connection: Option<ConnectionMode>,
    /// Number of tuner blocks.
    #[arg(long, global = true, value_name = "N")]
    blocks: Option<usize>,
    /// Run on a single thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Passages retrieved per query.
    #[arg(long, global = true, value_name = "N")]
    k: Option<usize>,
}

fn parse_connection(s: &str) -> std::result::Result<ConnectionMode, String> {
    ConnectionMode::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic retrieval task and dump the emulator's hidden
    /// states at every layer.
    Emulate(commands::EmulateArgs),
    /// Per-layer alignment and uniformity sweep; writes the heatmap CSV.
    Analyze(commands::AnalyzeArgs),
    /// Train a tuner on cached states; writes checkpoints and loss.csv.
    Train(commands::TrainArgs),
    /// Encode a dump with a trained tuner into a vector file.
    Encode(commands::EncodeArgs),
    /// Retrieve with query and passage vectors and score NDCG@10.
    SearchEval(commands::SearchEvalArgs),
    /// Train and evaluate named connection ablations.
    Ablate(commands::AblateArgs),
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Numeric { .. } => 3,
        Error::Io { .. } | Error::Format(_) | Error::Data(_) => 2,
    }
}

fn thread_count(deterministic: bool) -> Result<Option<usize>> {
    if deterministic {
        return Ok(Some(1));
    }
    match std::env::var("LMORT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("LMORT_THREADS={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.global.deterministic)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let manifest = match &cli.global.manifest {
        Some(p) => Manifest::load(p)?,
        None => Manifest::default(),
    };
    let g = &cli.global;
    match cli.command {
        Command::Emulate(a) => commands::emulate(a, manifest, g),
        Command::Analyze(a) => commands::analyze(a, manifest, g),
        Command::Train(a) => commands::train(a, manifest, g),
        Command::Encode(a) => commands::encode(a, manifest, g),
        Command::SearchEval(a) => commands::search_eval(a, manifest, g),
        Command::Ablate(a) => commands::ablate(a, manifest, g),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
