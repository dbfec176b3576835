use std::fs;
use std::path::PathBuf;

use anyhow::{ensure, Context, Result};
use clap::Args;
use serde::Serialize;
use tunewake::musdet::{self, quantize_weights, DetectorTrainConfig};
use tunewake::nnfp::{train_embedder as fit_embedder, AlignedCorpus, EmbedderTrainConfig, TRAIN_EXCERPT_S};
use tunewake::synth::mix_seed;
use tunewake::weights::DETECTOR_MAGIC;
use tunewake::{DetectorTopology, EmbedderTopology, PipelineConfig};

use crate::corpus::{song_files, Manifest};

#[derive(Debug, Args)]
pub struct TrainDetectorArgs {
    /// Output weight file (8-bit quantized NPMD).
    #[arg(long)]
    pub out: PathBuf,
    /// Synthetic training clips, half music.
    #[arg(long, default_value_t = 1600)]
    pub clips: usize,
    /// Held-out clips for the reported accuracy.
    #[arg(long, default_value_t = 400)]
    pub test_clips: usize,
    #[arg(long, default_value_t = 5.0)]
    pub clip_s: f64,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Serialize)]
struct DetectorSummary {
    parameters: usize,
    file_bytes: usize,
    final_loss: f64,
    held_out_accuracy: f64,
    quantized_accuracy: f64,
}

pub fn train_detector(cfg: &PipelineConfig, args: &TrainDetectorArgs) -> Result<()> {
    ensure!(args.clips >= 2, "--clips must be at least 2");
    let train = musdet::synthetic_corpus(mix_seed(cfg.seed, 1), args.clips, args.clip_s);
    let test = musdet::synthetic_corpus(mix_seed(cfg.seed, 2), args.test_clips, args.clip_s);
    let defaults = DetectorTrainConfig::default();
    let train_cfg = DetectorTrainConfig {
        epochs: args.epochs.unwrap_or(defaults.epochs),
        seed: cfg.seed,
        ..defaults
    };
    let topology = DetectorTopology::default();
    let (weights, report) = musdet::train_detector(&train, topology, &train_cfg)?;
    let bytes = quantize_weights(&weights).to_bytes(DETECTOR_MAGIC);
    fs::write(&args.out, &bytes).with_context(|| format!("writing {}", args.out.display()))?;
    let quantized = tunewake::DetectorWeights::from_bytes(&bytes)?;
    let summary = DetectorSummary {
        parameters: musdet::parameter_count(&topology),
        file_bytes: bytes.len(),
        final_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        held_out_accuracy: musdet::accuracy(&weights, &test)?,
        quantized_accuracy: musdet::accuracy(&quantized, &test)?,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainEmbedderArgs {
    /// Corpus directory produced by `gen-corpus`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Fingerprint dimension (64, 96 or 128); defaults to the config's.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seconds from the start of each song used for training.
    #[arg(long, default_value_t = TRAIN_EXCERPT_S)]
    pub train_s: f64,
    /// Output weight file (float32 NPFW).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct EmbedderSummary {
    dim: usize,
    parameters: usize,
    songs: usize,
    epoch_losses: Vec<f64>,
}

pub fn train_embedder(cfg: &PipelineConfig, args: &TrainEmbedderArgs) -> Result<()> {
    let dim = args.dim.unwrap_or(cfg.embedder.dim);
    let mut checked = cfg.clone();
    checked.embedder.dim = dim;
    checked.validate()?;
    let manifest = Manifest::load(&args.corpus)?;
    let mut songs = Vec::new();
    for song in song_files(&manifest)? {
        let pcm = manifest.read_wav(song.path)?.canonicalize()?;
        let keep = ((args.train_s * 16_000.0) as usize).min(pcm.samples.len());
        songs.push((song.song_id, pcm.samples[..keep].iter().map(|&s| s as f32 / 32767.0).collect()));
    }
    let corpus = AlignedCorpus {
        corpus_seed: cfg.seed,
        songs,
    };
    let defaults = EmbedderTrainConfig::default();
    let train_cfg = EmbedderTrainConfig {
        epochs: args.epochs.unwrap_or(defaults.epochs),
        seed: cfg.seed,
        ..defaults
    };
    let (weights, report) = fit_embedder(&corpus, EmbedderTopology::with_dim(dim), &train_cfg)?;
    fs::write(&args.out, weights.to_bytes()).with_context(|| format!("writing {}", args.out.display()))?;
    let summary = EmbedderSummary {
        dim,
        parameters: weights.parameter_count(),
        songs: corpus.songs.len(),
        epoch_losses: report.epoch_losses,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
