use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tunewake::config::SEED_ENV;
use tunewake::PipelineConfig;

mod catalog;
mod corpus;
mod evaluate;
mod train;

/// On-device style continuous music recognition: synthetic corpora, model
/// training, fingerprint DBs, one-shot recognition, simulated always-on
/// listening and evaluation sweeps.
///
/// Machine-readable output (JSON, CSV) goes to stdout, diagnostics to stderr.
#[derive(Debug, Parser)]
#[command(name = "tunewake", version)]
struct Cli {
    /// Pipeline config (TOML); missing keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true, env = SEED_ENV)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the effective config in its canonical TOML form.
    Config,
    /// Render synthetic songs, labelled query clips and a manifest.
    GenCorpus(corpus::GenCorpusArgs),
    /// Train the music detector on synthetic music / non-music clips.
    TrainDetector(train::TrainDetectorArgs),
    /// Train a fingerprint embedder on a corpus's songs.
    TrainEmbedder(train::TrainEmbedderArgs),
    /// Fingerprint a corpus and write an NPDB file.
    Build(catalog::BuildArgs),
    /// Recognize one clip; exit 0 on a match, 1 on no match, 2 on error.
    Recognize(catalog::RecognizeArgs),
    /// Simulate always-on listening over a long recording.
    Stream(catalog::StreamArgs),
    /// Precision/recall sweep per DB dimension and scorer, as CSV.
    EvalPr(evaluate::EvalPrArgs),
    /// Gate recall vs. false positives per hour over (t, c), as CSV.
    EvalDetector(evaluate::EvalDetectorArgs),
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            PipelineConfig::from_toml(&text).with_context(|| format!("loading {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    Ok(match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(ExitCode::SUCCESS)
        }
        Command::GenCorpus(args) => corpus::gen_corpus(&cfg, &args).map(|_| ExitCode::SUCCESS),
        Command::TrainDetector(args) => train::train_detector(&cfg, &args).map(|_| ExitCode::SUCCESS),
        Command::TrainEmbedder(args) => train::train_embedder(&cfg, &args).map(|_| ExitCode::SUCCESS),
        Command::Build(args) => catalog::build(&cfg, &args).map(|_| ExitCode::SUCCESS),
        Command::Recognize(args) => catalog::recognize(&cfg, &args),
        Command::Stream(args) => catalog::stream(&cfg, &args).map(|_| ExitCode::SUCCESS),
        Command::EvalPr(args) => evaluate::eval_pr(&cfg, &args).map(|_| ExitCode::SUCCESS),
        Command::EvalDetector(args) => evaluate::eval_detector(&cfg, &args).map(|_| ExitCode::SUCCESS),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        // A closed stdout (e.g. piped into `head`) is not a failure.
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
