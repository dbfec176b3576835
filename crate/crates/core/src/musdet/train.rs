use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::DetectorWeights;
use super::{DetectorError, DetectorTopology};
use crate::frontend::{FrontendConfig, LogMelExtractor, LogMelFrame};
use crate::nn::{sigmoid, Adam};
use crate::synth::{detector_clip, rng_for};

/// A log-Mel clip labelled music / not music.
#[derive(Debug, Clone)]
pub struct LabeledFrames {
    pub frames: Vec<LogMelFrame>,
    pub is_music: bool,
}

#[derive(Debug, Clone)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Windows used to estimate the frozen batch-norm statistics.
    pub calibration_windows: usize,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 0,
            calibration_windows: 256,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

pub(crate) fn window_input(frames: &[LogMelFrame], channels: usize) -> Vec<f64> {
    frames
        .iter()
        .flat_map(|f| f.coeffs[..channels].iter().map(|&v| v as f64))
        .collect()
}

/// Numerically stable binary cross-entropy on a logit.
fn bce_with_logit(logit: f64, is_music: bool) -> f64 {
    let y = if is_music { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

impl DetectorWeights {
    /// Binary cross-entropy of one window and its gradient w.r.t. every
    /// trainable tensor.
    pub fn loss_and_gradient(
        &self,
        window: &[LogMelFrame],
        is_music: bool,
    ) -> Result<(f64, DetectorWeights), DetectorError> {
        let expected = self.topology.window();
        if window.len() != expected {
            return Err(DetectorError::WrongWindow {
                expected,
                found: window.len(),
            });
        }
        let cache = self.forward_cached(window_input(window, self.topology.channels));
        let mut grads = self.zeros_like();
        let y = if is_music { 1.0 } else { 0.0 };
        self.backward(&cache, sigmoid(cache.logit) - y, &mut grads);
        Ok((bce_with_logit(cache.logit, is_music), grads))
    }

    /// Sets every batch-norm layer's statistics from data, first layer first,
    /// so each normalized pre-activation starts at zero mean and unit variance.
    pub fn calibrate_batch_norm(&mut self, windows: &[Vec<f64>]) {
        let c = self.topology.channels;
        for l in 0..self.convs.len() {
            let mut pre = Vec::new();
            for w in windows {
                pre.extend(self.forward_cached(w.clone()).pre_at(l));
            }
            if let Some(bn) = &mut self.convs[l].bn {
                bn.calibrate(&pre, |i| i % c);
            }
        }
        let h = self.topology.hidden;
        let mut pre = Vec::new();
        for w in windows {
            pre.extend(self.forward_cached(w.clone()).hidden_pre());
        }
        if let Some(bn) = &mut self.hidden.bn {
            bn.calibrate(&pre, |i| i % h);
        }
    }
}

/// Mini-batch Adam on binary cross-entropy over random window-length
/// sub-clips. Deterministic given `cfg.seed`.
pub fn train_detector(
    corpus: &[LabeledFrames],
    topology: DetectorTopology,
    cfg: &DetectorTrainConfig,
) -> Result<(DetectorWeights, TrainReport), DetectorError> {
    if corpus.is_empty() {
        return Err(DetectorError::EmptyCorpus);
    }
    let window = topology.window();
    if let Some((index, clip)) = corpus.iter().enumerate().find(|(_, c)| c.frames.len() < window) {
        return Err(DetectorError::ClipTooShort {
            index,
            frames: clip.frames.len(),
            window,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = DetectorWeights::random(topology, &mut rng);
    let sub_clip = |clip: &LabeledFrames, rng: &mut ChaCha8Rng| {
        let start = rng.random_range(0..=clip.frames.len() - window);
        window_input(&clip.frames[start..start + window], topology.channels)
    };

    let calib: Vec<Vec<f64>> = (0..cfg.calibration_windows.max(1))
        .map(|_| {
            let clip = &corpus[rng.random_range(0..corpus.len())];
            sub_clip(clip, &mut rng)
        })
        .collect();
    weights.calibrate_batch_norm(&calib);

    let mut opt = Adam::new(cfg.learning_rate);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = weights.zeros_like();
            for &i in batch {
                let clip = &corpus[i];
                let x = sub_clip(clip, &mut rng);
                let cache = weights.forward_cached(x);
                let y = if clip.is_music { 1.0 } else { 0.0 };
                epoch_loss += bce_with_logit(cache.logit, clip.is_music);
                weights.backward(&cache, (sigmoid(cache.logit) - y) / batch.len() as f64, &mut grads);
            }
            opt.step(weights.trainable_mut(), grads.trainable());
        }
        report.epoch_losses.push(epoch_loss / corpus.len() as f64);
    }
    Ok((weights, report))
}

/// Balanced synthetic corpus of `clips` clips of `len_s` seconds (even
/// indices music, odd ones not), from [`detector_clip`].
pub fn synthetic_corpus(seed: u64, clips: usize, len_s: f64) -> Vec<LabeledFrames> {
    let extractor = LogMelExtractor::new(FrontendConfig::default()).expect("default frontend is valid");
    let mut rng = rng_for(seed, 0xDE7);
    (0..clips)
        .map(|i| {
            let clip = detector_clip(&mut rng, i % 2 == 0, len_s);
            LabeledFrames {
                frames: extractor
                    .frames(&clip.audio)
                    .expect("clips are canonical and longer than one frame"),
                is_music: clip.is_music,
            }
        })
        .collect()
}

/// Fraction of clips whose centre window is classified correctly at 0.5.
pub fn accuracy(weights: &DetectorWeights, corpus: &[LabeledFrames]) -> Result<f64, DetectorError> {
    let window = weights.topology.window();
    let mut correct = 0;
    for clip in corpus {
        if clip.frames.len() < window {
            return Err(DetectorError::ClipTooShort {
                index: 0,
                frames: clip.frames.len(),
                window,
            });
        }
        let start = (clip.frames.len() - window) / 2;
        let p = weights.forward(&clip.frames[start..start + window])?;
        correct += usize::from((p > 0.5) == clip.is_music);
    }
    Ok(correct as f64 / corpus.len().max(1) as f64)
}
