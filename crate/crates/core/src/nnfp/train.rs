use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::model::{BatchCache, EmbedderWeights};
use super::triplet::{mine_triplets, SegmentLabel, TripletBatch};
use super::{EmbedderError, EmbedderTopology};
use crate::frontend::{FrontendConfig, LogMelExtractor, LogMelFrame};
use crate::nn::Adam;
use crate::synth::{excerpt, render_song_f32, rng_for, to_pcm, Augmentation};

/// Clean reference songs from which aligned (clean, noisy) segment pairs are
/// drawn. Alignment is known by construction.
#[derive(Debug, Clone)]
pub struct AlignedCorpus {
    pub corpus_seed: u64,
    /// `(song_id, clean samples at 16 kHz)`.
    pub songs: Vec<(u32, Vec<f32>)>,
}

/// One clean reference window and a noisy, slightly shifted view of it.
#[derive(Debug, Clone)]
pub struct SegmentPair {
    pub song_id: u32,
    pub anchor_offset_ms: i64,
    pub positive_offset_ms: i64,
    pub anchor: Vec<LogMelFrame>,
    pub positive: Vec<LogMelFrame>,
    pub augmentation: Augmentation,
}

impl AlignedCorpus {
    /// Renders the first `duration_s` seconds of each synthetic song.
    pub fn synthetic(corpus_seed: u64, song_ids: &[u32], duration_s: f64) -> Self {
        Self {
            corpus_seed,
            songs: song_ids
                .iter()
                .map(|&id| (id, render_song_f32(corpus_seed, id, duration_s)))
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.songs.is_empty()
    }

    fn song_len_s(&self, idx: usize) -> f64 {
        self.songs[idx].1.len() as f64 / 16_000.0
    }

    /// Cuts the window starting at `offset_ms` from song `idx`, optionally
    /// distorted, and converts it to log-Mel frames.
    fn window(
        &self,
        extractor: &LogMelExtractor,
        idx: usize,
        offset_ms: i64,
        aug: Option<(&Augmentation, &mut ChaCha8Rng)>,
    ) -> Vec<LogMelFrame> {
        let len_s = window_seconds(extractor.config(), 96);
        let clean = excerpt(&self.songs[idx].1, offset_ms as f64 / 1000.0, len_s);
        let audio = match aug {
            Some((a, rng)) => a.apply(&clean, rng),
            None => clean,
        };
        extractor
            .frames_from_samples(&to_pcm(&audio).samples, 0)
            .expect("window is long enough by construction")
    }

    /// Draws an aligned pair at `offset_ms` in song `idx`; the positive is
    /// shifted by a random jitter of at most `max_jitter_ms`.
    pub fn sample_pair(
        &self,
        extractor: &LogMelExtractor,
        idx: usize,
        offset_ms: i64,
        max_jitter_ms: i32,
        rng: &mut ChaCha8Rng,
    ) -> SegmentPair {
        let augmentation = Augmentation::random(rng, max_jitter_ms);
        let positive_offset_ms = (offset_ms + augmentation.offset_ms as i64).max(0);
        let anchor = self.window(extractor, idx, offset_ms, None);
        let positive = self.window(extractor, idx, positive_offset_ms, Some((&augmentation, rng)));
        SegmentPair {
            song_id: self.songs[idx].0,
            anchor_offset_ms: offset_ms,
            positive_offset_ms,
            anchor,
            positive,
            augmentation,
        }
    }
}

/// Seconds of audio needed for `frames` analysis frames.
fn window_seconds(cfg: &FrontendConfig, frames: usize) -> f64 {
    (cfg.window_samples() + (frames - 1) * cfg.hop_samples()) as f64 / 16_000.0
}

/// Seconds from the start of each catalogue song used for training by
/// default; the rest of the song is only ever seen at indexing time.
pub const TRAIN_EXCERPT_S: f64 = 60.0;

#[derive(Debug, Clone)]
pub struct EmbedderTrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Anchors per batch; drawn as pairs from the same song.
    pub anchors_per_batch: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub pos_tolerance_ms: i64,
    /// Largest time shift between an anchor and its positive.
    pub max_jitter_ms: i32,
    pub calibration_windows: usize,
    pub seed: u64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 32,
            steps_per_epoch: 50,
            anchors_per_batch: 32,
            learning_rate: 4e-3,
            margin: 0.4,
            pos_tolerance_ms: 300,
            max_jitter_ms: 250,
            calibration_windows: 192,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EmbedderTrainReport {
    /// Mean mined-triplet loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl EmbedderWeights {
    /// Mean triplet loss of `batch` over the embeddings of `windows`, with the
    /// gradient w.r.t. every trainable tensor.
    pub fn triplet_loss_and_gradient(
        &self,
        windows: &[&[LogMelFrame]],
        batch: &TripletBatch,
    ) -> Result<(f64, EmbedderWeights), EmbedderError> {
        let cache = self.forward_batch(self.prepare_input(windows)?, windows.len());
        Ok(self.triplet_step(&cache, batch))
    }

    fn triplet_step(&self, cache: &BatchCache, batch: &TripletBatch) -> (f64, EmbedderWeights) {
        let (loss, g) = batch.loss_and_gradient(&rows(&cache.out, self.dim()));
        let dout: Vec<f64> = g.into_iter().flatten().collect();
        let mut grads = self.zeros_like();
        self.backward_batch(cache, &dout, &mut grads);
        (loss, grads)
    }
}

fn rows(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).map(<[f64]>::to_vec).collect()
}

/// Windows and labels for one training batch.
fn draw_batch(
    corpus: &AlignedCorpus,
    extractor: &LogMelExtractor,
    cfg: &EmbedderTrainConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<LogMelFrame>>, Vec<SegmentLabel>) {
    let songs_per_batch = (cfg.anchors_per_batch / 2).clamp(1, corpus.songs.len());
    let chosen = sample(rng, corpus.songs.len(), songs_per_batch).into_vec();
    let mut windows = Vec::new();
    let mut labels = Vec::new();
    for idx in chosen {
        // Two anchors 0.5-4 s apart in the same song: hard negatives for each
        // other.
        let len_ms = ((corpus.song_len_s(idx) - 1.0) * 1000.0).max(0.0) as i64;
        let gap = rng.random_range(500..=4000).min(len_ms);
        let first = rng.random_range(0..=(len_ms - gap).max(0));
        for offset in [first, first + gap] {
            let pair = corpus.sample_pair(extractor, idx, offset, cfg.max_jitter_ms, rng);
            labels.push(SegmentLabel {
                song_id: pair.song_id,
                offset_ms: pair.anchor_offset_ms,
            });
            labels.push(SegmentLabel {
                song_id: pair.song_id,
                offset_ms: pair.positive_offset_ms,
            });
            windows.push(pair.anchor);
            windows.push(pair.positive);
        }
    }
    (windows, labels)
}

/// Cosine decay from `base` to 5% of `base` over the run.
fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let t = step as f64 / total as f64;
    base * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Trains a fingerprinter with semi-hard triplet mining and Adam.
/// Deterministic given `cfg.seed`.
pub fn train_embedder(
    corpus: &AlignedCorpus,
    topology: EmbedderTopology,
    cfg: &EmbedderTrainConfig,
) -> Result<(EmbedderWeights, EmbedderTrainReport), EmbedderError> {
    if corpus.is_empty() {
        return Err(EmbedderError::EmptyCorpus);
    }
    if corpus.songs.len() < 2 {
        return Err(EmbedderError::NoNegative);
    }
    let extractor = LogMelExtractor::new(FrontendConfig::default())
        .map_err(|e| EmbedderError::Topology(e.to_string()))?;
    let mut rng = rng_for(cfg.seed, 0xE3B);
    let mut weights = EmbedderWeights::random(topology, &mut rng)?;

    // Fixed calibration set for the frozen batch-norm statistics.
    let mut calib = Vec::new();
    while calib.len() < cfg.calibration_windows {
        let (w, _) = draw_batch(corpus, &extractor, cfg, &mut rng);
        calib.extend(w);
    }
    calib.truncate(cfg.calibration_windows.max(1));

    let mut adam = Adam::new(cfg.learning_rate);
    let mut report = EmbedderTrainReport::default();
    let total_steps = (cfg.epochs * cfg.steps_per_epoch).max(1);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let refs: Vec<&[LogMelFrame]> = calib.iter().map(Vec::as_slice).collect();
        weights.calibrate_batch_norm(&refs)?;
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let (windows, labels) = draw_batch(corpus, &extractor, cfg, &mut rng);
            let refs: Vec<&[LogMelFrame]> = windows.iter().map(Vec::as_slice).collect();
            let cache = weights.forward_batch(weights.prepare_input(&refs)?, refs.len());
            let emb = rows(&cache.out, weights.dim());
            let batch = mine_triplets(&emb, &labels, cfg.pos_tolerance_ms, cfg.margin)?;
            let (loss, grads) = weights.triplet_step(&cache, &batch);
            total += loss;
            adam.lr = cosine_lr(cfg.learning_rate, step, total_steps);
            step += 1;
            adam.step(weights.trainable_mut(), grads.trainable());
        }
        report
            .epoch_losses
            .push(total / cfg.steps_per_epoch.max(1) as f64);
    }
    let refs: Vec<&[LogMelFrame]> = calib.iter().map(Vec::as_slice).collect();
    weights.calibrate_batch_norm(&refs)?;
    Ok((weights, report))
}
