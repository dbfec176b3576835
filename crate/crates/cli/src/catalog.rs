use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use tunewake::dbstore::index_songs;
use tunewake::frontend::{decode_raw_pcm, decode_wav, LogMelExtractor, CANONICAL_RATE};
use tunewake::pipeline::fingerprint_audio;
use tunewake::{build_db, load_db, Database, DetectorWeights, EmbedderWeights, MatchResult, PipelineConfig, Recognizer, SongMeta};

use crate::corpus::{read_wav, song_files, Manifest};

/// Embedder weights live next to the DB they built: `db.npdb` → `db.npfw`.
pub fn weights_path(db: &Path) -> PathBuf {
    db.with_extension("npfw")
}

pub fn load_embedder(path: &Path) -> Result<EmbedderWeights> {
    let bytes = fs::read(path).with_context(|| format!("reading embedder weights {}", path.display()))?;
    EmbedderWeights::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
}

pub fn load_database(path: &Path) -> Result<Database> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_db(&bytes).with_context(|| format!("loading {}", path.display()))
}

/// Loads a DB and its embedder (`weights` or the DB's sibling `.npfw`).
pub fn recognizer(cfg: &PipelineConfig, db: &Path, weights: Option<&Path>) -> Result<Recognizer> {
    let database = load_database(db)?;
    let embedder = load_embedder(weights.unwrap_or(&weights_path(db)))?;
    Ok(Recognizer::new(cfg.frontend.clone(), embedder, database, cfg.matcher.clone())?)
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Corpus directory produced by `gen-corpus`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Embedder weights from `train-embedder`.
    #[arg(long)]
    pub weights: PathBuf,
    /// Output NPDB file; the weights are copied beside it as `.npfw`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn build(cfg: &PipelineConfig, args: &BuildArgs) -> Result<()> {
    let embedder = load_embedder(&args.weights)?;
    if embedder.dim() != cfg.embedder.dim {
        bail!(
            "weights {} emit d = {}, config expects embedder.dim = {}",
            args.weights.display(),
            embedder.dim(),
            cfg.embedder.dim
        );
    }
    let manifest = Manifest::load(&args.corpus)?;
    let extractor = LogMelExtractor::new(cfg.frontend.clone())?;
    let mut songs = Vec::new();
    for song in song_files(&manifest)? {
        let pcm = manifest.read_wav(song.path)?;
        let fps = fingerprint_audio(&extractor, &embedder, &pcm)
            .with_context(|| format!("fingerprinting {}", song.path))?;
        songs.push((
            SongMeta {
                song_id: song.song_id,
                title: song.title.to_string(),
                artist: song.artist.to_string(),
                duration_s: song.duration_s,
            },
            fps,
        ));
    }
    let (index, density) = index_songs(&songs, &cfg.index, &cfg.matcher)?;
    let metas: Vec<SongMeta> = songs.into_iter().map(|(m, _)| m).collect();
    let bytes = build_db(&metas, &index, &density)?;
    fs::write(&args.out, &bytes).with_context(|| format!("writing {}", args.out.display()))?;
    let sibling = weights_path(&args.out);
    if fs::canonicalize(&args.weights).ok() != fs::canonicalize(&sibling).ok() {
        fs::copy(&args.weights, &sibling).with_context(|| format!("copying weights to {}", sibling.display()))?;
    }
    let report = load_db(&bytes)?.storage_report();
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Debug, Args)]
pub struct RecognizeArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// Query audio: WAV, or headerless s16le mono 16 kHz with `--raw`.
    #[arg(long)]
    pub wav: PathBuf,
    #[arg(long)]
    pub raw: bool,
    /// Embedder weights; defaults to the DB's sibling `.npfw`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

pub fn recognize(cfg: &PipelineConfig, args: &RecognizeArgs) -> Result<ExitCode> {
    let bytes = fs::read(&args.wav).with_context(|| format!("reading {}", args.wav.display()))?;
    let pcm = if args.raw { decode_raw_pcm(&bytes) } else { decode_wav(&bytes) }
        .with_context(|| format!("decoding {}", args.wav.display()))?;
    let rec = recognizer(cfg, &args.db, args.weights.as_deref())?;
    let result = rec.recognize(&pcm)?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(if result.accepted { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// Long recording to listen to.
    #[arg(long)]
    pub wav: PathBuf,
    /// Detector weights from `train-detector`.
    #[arg(long)]
    pub detector: PathBuf,
    /// TOML file whose `[gate]` table replaces the config's gate settings.
    #[arg(long)]
    pub gate_config: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogLine<'a> {
    Wakeup {
        trigger_time_s: f64,
        mean_confidence: f64,
        captured_s: f64,
        result: Option<&'a MatchResult>,
    },
    Summary {
        duration_s: f64,
        wakeups: usize,
        matches: usize,
        detector_predictions: usize,
        fingerprinted_s: f64,
        duty_cycle: f64,
    },
}

pub fn stream(cfg: &PipelineConfig, args: &StreamArgs) -> Result<()> {
    let gate = match &args.gate_config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            PipelineConfig::from_toml(&text)
                .with_context(|| format!("loading {}", path.display()))?
                .gate
        }
        None => cfg.gate.clone(),
    };
    let detector_bytes = fs::read(&args.detector).with_context(|| format!("reading {}", args.detector.display()))?;
    let detector = DetectorWeights::from_bytes(&detector_bytes)
        .with_context(|| format!("loading {}", args.detector.display()))?;
    let rec = recognizer(cfg, &args.db, args.weights.as_deref())?;
    let pcm = read_wav(&args.wav)?.canonicalize()?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut matches = 0;
    let mut log = |events: Vec<tunewake::pipeline::StreamEvent>, out: &mut dyn Write| -> Result<()> {
        for e in events {
            matches += usize::from(e.result.as_ref().is_some_and(|r| r.accepted));
            let line = LogLine::Wakeup {
                trigger_time_s: e.detection.trigger_time_s,
                mean_confidence: e.detection.mean_confidence,
                captured_s: e.detection.audio.duration_s(),
                result: e.result.as_ref(),
            };
            writeln!(out, "{}", serde_json::to_string(&line)?)?;
        }
        Ok(())
    };
    let mut listener = rec.listen(&detector, gate)?;
    for chunk in pcm.samples.chunks(CANONICAL_RATE as usize) {
        log(listener.push(chunk)?, &mut out)?;
    }
    let (events, stats) = listener.finish()?;
    log(events, &mut out)?;
    let summary = LogLine::Summary {
        duration_s: pcm.duration_s(),
        wakeups: stats.wakeups,
        matches,
        detector_predictions: stats.detector_predictions,
        fingerprinted_s: stats.fingerprinted_samples as f64 / CANONICAL_RATE as f64,
        duty_cycle: stats.duty_cycle(),
    };
    writeln!(out, "{}", serde_json::to_string(&summary)?)?;
    Ok(())
}
