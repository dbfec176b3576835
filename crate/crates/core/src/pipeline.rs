//! End-to-end recognition: audio → fingerprints → DB match, plus the
//! always-on listening loop in which the music gate decides when the
//! fingerprinter runs.

use serde::Serialize;
use thiserror::Error;

use crate::dbstore::{Database, DbError};
use crate::frontend::{FrontendConfig, FrontendError, LogMelExtractor, PcmStream, StreamingFramer, CANONICAL_RATE};
use crate::musdet::{DetectorError, DetectorWeights, Gate, GateConfig, StreamingDetector};
use crate::nnfp::{EmbedderError, EmbedderWeights, Fingerprint};
use crate::seqmatch::{MatchResult, MatcherConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Embedder(#[from] EmbedderError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("embedder emits d = {embedder}, DB stores d = {db}")]
    DimMismatch { embedder: usize, db: usize },
}

/// A gate firing and the audio handed to the fingerprinter.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvent {
    pub trigger_time_s: f64,
    pub mean_confidence: f64,
    /// `buffer_len_s` seconds of audio starting at the trigger (shorter only
    /// when the stream ends first).
    pub audio: PcmStream,
}

/// One wakeup of the recognizer.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamEvent {
    pub detection: DetectionEvent,
    /// `None` when the captured audio was too short to fingerprint.
    pub result: Option<MatchResult>,
}

/// Power proxies of a listening session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ListenStats {
    pub wakeups: usize,
    pub detector_predictions: usize,
    pub total_samples: u64,
    /// Samples the fingerprinter processed.
    pub fingerprinted_samples: u64,
}

impl ListenStats {
    /// Fraction of the stream the fingerprinter ran on.
    pub fn duty_cycle(&self) -> f64 {
        if self.total_samples == 0 {
            0.0
        } else {
            self.fingerprinted_samples as f64 / self.total_samples as f64
        }
    }
}

/// Fingerprints audio of any supported rate/channel layout.
pub fn fingerprint_audio(
    extractor: &LogMelExtractor,
    embedder: &EmbedderWeights,
    pcm: &PcmStream,
) -> Result<Vec<Fingerprint>, PipelineError> {
    let pcm = pcm.clone().canonicalize()?;
    let frames = extractor.frames(&pcm)?;
    Ok(embedder.fingerprint_stream(&frames)?)
}

/// Embedder + catalogue + matcher settings.
#[derive(Debug)]
pub struct Recognizer {
    extractor: LogMelExtractor,
    embedder: EmbedderWeights,
    db: Database,
    matcher: MatcherConfig,
}

impl Recognizer {
    pub fn new(
        frontend: FrontendConfig,
        embedder: EmbedderWeights,
        db: Database,
        matcher: MatcherConfig,
    ) -> Result<Self, PipelineError> {
        if embedder.dim() != db.index().dim() {
            return Err(PipelineError::DimMismatch {
                embedder: embedder.dim(),
                db: db.index().dim(),
            });
        }
        Ok(Self {
            extractor: LogMelExtractor::new(frontend)?,
            embedder,
            db,
            matcher,
        })
    }

    pub fn db(&self) -> &Database {
        &self.db
    }

    pub fn matcher(&self) -> &MatcherConfig {
        &self.matcher
    }

    pub fn fingerprint(&self, pcm: &PcmStream) -> Result<Vec<Fingerprint>, PipelineError> {
        fingerprint_audio(&self.extractor, &self.embedder, pcm)
    }

    pub fn recognize_fingerprints(&self, query: &[Fingerprint]) -> Result<MatchResult, PipelineError> {
        Ok(self.db.recognize(query, &self.matcher)?)
    }

    pub fn recognize(&self, pcm: &PcmStream) -> Result<MatchResult, PipelineError> {
        self.recognize_fingerprints(&self.fingerprint(pcm)?)
    }

    /// Starts a listening session driven by `detector` and `gate`.
    pub fn listen(&self, detector: &DetectorWeights, gate: GateConfig) -> Result<Listener<'_>, PipelineError> {
        gate.validate()?;
        Ok(Listener {
            recognizer: self,
            framer: StreamingFramer::new(self.extractor.config().clone())?,
            detector: StreamingDetector::new(detector),
            buffer_samples: (gate.buffer_len_s * CANONICAL_RATE as f64).round() as usize,
            gate: Gate::new(gate),
            captures: Vec::new(),
            stats: ListenStats::default(),
        })
    }
}

struct Capture {
    trigger_time_s: f64,
    mean_confidence: f64,
    samples: Vec<i16>,
}

/// Continuous listening over a canonical (16 kHz mono) sample stream. The
/// detector runs on every frame; the fingerprinter only on captured buffers.
pub struct Listener<'a> {
    recognizer: &'a Recognizer,
    framer: StreamingFramer,
    detector: StreamingDetector,
    gate: Gate,
    buffer_samples: usize,
    captures: Vec<Capture>,
    stats: ListenStats,
}

impl Listener<'_> {
    pub fn stats(&self) -> ListenStats {
        self.stats
    }

    /// Feeds samples; returns the events whose capture completed.
    pub fn push(&mut self, samples: &[i16]) -> Result<Vec<StreamEvent>, PipelineError> {
        let cfg = self.recognizer.extractor.config().clone();
        let (win, hop) = (cfg.window_samples(), cfg.hop_samples());
        let chunk_start = self.stats.total_samples;
        self.stats.total_samples += samples.len() as u64;
        // Captures already open take this chunk first.
        for c in &mut self.captures {
            let room = self.buffer_samples - c.samples.len();
            c.samples.extend_from_slice(&samples[..room.min(samples.len())]);
        }
        for frame in self.framer.push(samples) {
            let Some(p) = self.detector.push(&frame) else { continue };
            self.stats.detector_predictions += 1;
            // The prediction covers audio up to the end of this frame.
            let end_sample = frame.frame_index * hop as u64 + win as u64;
            let time_s = end_sample as f64 / CANONICAL_RATE as f64;
            if let Some(t) = self.gate.push(time_s, p) {
                self.stats.wakeups += 1;
                let from = end_sample.saturating_sub(chunk_start) as usize;
                let take = &samples[from.min(samples.len())..];
                self.captures.push(Capture {
                    trigger_time_s: t.time_s,
                    mean_confidence: t.mean_confidence,
                    samples: take[..self.buffer_samples.min(take.len())].to_vec(),
                });
            }
        }
        let (done, open): (Vec<_>, Vec<_>) = std::mem::take(&mut self.captures)
            .into_iter()
            .partition(|c| c.samples.len() >= self.buffer_samples);
        self.captures = open;
        done.into_iter().map(|c| self.complete(c)).collect()
    }

    /// Ends the stream, completing any capture still being filled.
    pub fn finish(mut self) -> Result<(Vec<StreamEvent>, ListenStats), PipelineError> {
        let events = std::mem::take(&mut self.captures)
            .into_iter()
            .map(|c| self.complete(c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((events, self.stats))
    }

    fn complete(&mut self, c: Capture) -> Result<StreamEvent, PipelineError> {
        let audio = PcmStream::mono(c.samples, CANONICAL_RATE);
        let result = match self.recognizer.fingerprint(&audio) {
            Ok(fps) => {
                self.stats.fingerprinted_samples += audio.samples.len() as u64;
                Some(self.recognizer.recognize_fingerprints(&fps)?)
            }
            Err(PipelineError::Embedder(EmbedderError::StreamTooShort { .. }))
            | Err(PipelineError::Frontend(FrontendError::TooShort { .. })) => None,
            Err(e) => return Err(e),
        };
        Ok(StreamEvent {
            detection: DetectionEvent {
                trigger_time_s: c.trigger_time_s,
                mean_confidence: c.mean_confidence,
                audio,
            },
            result,
        })
    }
}
