//! Audio frontend: WAV/raw PCM decoding, linear resampling and log-Mel
//! feature extraction shared by the music detector and the fingerprinter.

use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical sample rate every downstream stage expects.
pub const CANONICAL_RATE: u32 = 16_000;
/// Number of Mel coefficients per frame (detector input channel count).
pub const MEL_BINS: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum FrontendError {
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported codec: {0}")]
    UnsupportedCodec(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("sample rate {0} Hz outside supported range 8000..=48000")]
    UnsupportedRate(u32),
    #[error("invalid resampling target rate {0}")]
    InvalidTargetRate(u32),
    #[error("stream is not canonical (need {CANONICAL_RATE} Hz mono, got {rate} Hz x{channels})")]
    NotCanonical { rate: u32, channels: u16 },
    #[error("stream of {samples} samples is shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("invalid frontend config: {0}")]
    InvalidConfig(String),
}

/// Signed 16-bit PCM audio.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcmStream {
    pub samples: Vec<i16>,
    pub sample_rate: u32,
    pub channels: u16,
}

impl PcmStream {
    pub fn mono(samples: Vec<i16>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
            channels: 1,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / (self.sample_rate as f64 * self.channels as f64)
    }

    pub fn is_canonical(&self) -> bool {
        self.sample_rate == CANONICAL_RATE && self.channels == 1
    }

    /// Resamples to 16 kHz when needed.
    pub fn canonicalize(self) -> Result<Self, FrontendError> {
        if self.sample_rate == CANONICAL_RATE {
            Ok(self)
        } else {
            resample(&self, CANONICAL_RATE)
        }
    }
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct WavFormat {
    channels: u16,
    sample_rate: u32,
}

fn parse_fmt(chunk: &[u8]) -> Result<WavFormat, FrontendError> {
    if chunk.len() < 16 {
        return Err(FrontendError::MalformedHeader(format!(
            "fmt chunk is {} bytes, need at least 16",
            chunk.len()
        )));
    }
    let mut tag = read_u16(chunk, 0);
    let channels = read_u16(chunk, 2);
    let sample_rate = read_u32(chunk, 4);
    let block_align = read_u16(chunk, 12);
    let bits = read_u16(chunk, 14);
    if tag == 0xFFFE {
        // WAVE_FORMAT_EXTENSIBLE: the real format tag leads the subformat GUID.
        if chunk.len() < 40 {
            return Err(FrontendError::MalformedHeader(
                "extensible fmt chunk too short".into(),
            ));
        }
        tag = read_u16(chunk, 24);
    }
    if tag != 1 {
        return Err(FrontendError::UnsupportedCodec(format!(
            "format tag {tag:#06x} (only PCM is supported)"
        )));
    }
    if bits != 16 {
        return Err(FrontendError::UnsupportedCodec(format!(
            "{bits}-bit samples (only 16-bit PCM is supported)"
        )));
    }
    if !(1..=2).contains(&channels) {
        return Err(FrontendError::UnsupportedCodec(format!(
            "{channels} channels (only mono and stereo are supported)"
        )));
    }
    if block_align != channels * 2 {
        return Err(FrontendError::MalformedHeader(format!(
            "block align {block_align} inconsistent with {channels} channels"
        )));
    }
    if !(8_000..=48_000).contains(&sample_rate) {
        return Err(FrontendError::UnsupportedRate(sample_rate));
    }
    Ok(WavFormat {
        channels,
        sample_rate,
    })
}

/// Decodes a RIFF/WAVE PCM16 file. Stereo input is averaged down to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<PcmStream, FrontendError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(FrontendError::MalformedHeader(
            "missing RIFF/WAVE signature".into(),
        ));
    }
    let mut pos = 12;
    let mut format: Option<WavFormat> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        if id == b"data" {
            let fmt = format.ok_or_else(|| {
                FrontendError::MalformedHeader("data chunk precedes fmt chunk".into())
            })?;
            let available = bytes.len() - body;
            if size > available {
                return Err(FrontendError::TruncatedPayload {
                    expected: size,
                    found: available,
                });
            }
            let frame_bytes = 2 * fmt.channels as usize;
            if size % frame_bytes != 0 {
                return Err(FrontendError::TruncatedPayload {
                    expected: size.next_multiple_of(frame_bytes),
                    found: size,
                });
            }
            let payload = &bytes[body..body + size];
            let samples = match fmt.channels {
                1 => payload
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect(),
                _ => payload
                    .chunks_exact(4)
                    .map(|c| {
                        let l = i16::from_le_bytes([c[0], c[1]]) as i32;
                        let r = i16::from_le_bytes([c[2], c[3]]) as i32;
                        ((l + r) as f64 / 2.0).round() as i16
                    })
                    .collect(),
            };
            return Ok(PcmStream::mono(samples, fmt.sample_rate));
        }
        if body + size > bytes.len() {
            return Err(FrontendError::MalformedHeader(format!(
                "chunk {:?} overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        if id == b"fmt " {
            format = Some(parse_fmt(&bytes[body..body + size])?);
        }
        pos = body + size + (size & 1);
    }
    Err(match format {
        None => FrontendError::MalformedHeader("no fmt chunk".into()),
        Some(_) => FrontendError::MalformedHeader("no data chunk".into()),
    })
}

/// Encodes mono or interleaved PCM16 as a canonical 44-byte-header WAV file.
pub fn encode_wav(stream: &PcmStream) -> Vec<u8> {
    let data_len = stream.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&stream.channels.to_le_bytes());
    out.extend_from_slice(&stream.sample_rate.to_le_bytes());
    let block_align = stream.channels as u32 * 2;
    out.extend_from_slice(&(stream.sample_rate * block_align).to_le_bytes());
    out.extend_from_slice(&(block_align as u16).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for s in &stream.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Decodes headerless s16le mono audio at 16 kHz.
pub fn decode_raw_pcm(bytes: &[u8]) -> Result<PcmStream, FrontendError> {
    if bytes.len() % 2 != 0 {
        return Err(FrontendError::TruncatedPayload {
            expected: bytes.len() + 1,
            found: bytes.len(),
        });
    }
    let samples = bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(PcmStream::mono(samples, CANONICAL_RATE))
}

/// Linear-interpolation resampler. Output length is `floor(n * target / source)`.
pub fn resample(stream: &PcmStream, target_hz: u32) -> Result<PcmStream, FrontendError> {
    if target_hz == 0 {
        return Err(FrontendError::InvalidTargetRate(target_hz));
    }
    if !(8_000..=48_000).contains(&stream.sample_rate) {
        return Err(FrontendError::UnsupportedRate(stream.sample_rate));
    }
    if stream.channels != 1 {
        return Err(FrontendError::NotCanonical {
            rate: stream.sample_rate,
            channels: stream.channels,
        });
    }
    if target_hz == stream.sample_rate {
        return Ok(stream.clone());
    }
    let n_in = stream.samples.len();
    let n_out = (n_in as u64 * target_hz as u64 / stream.sample_rate as u64) as usize;
    let step = stream.sample_rate as f64 / target_hz as f64;
    let src = &stream.samples;
    let samples = (0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let idx = pos.floor() as usize;
            let frac = pos - idx as f64;
            let a = src[idx.min(n_in - 1)] as f64;
            let b = src[(idx + 1).min(n_in - 1)] as f64;
            (a + (b - a) * frac).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
        })
        .collect();
    Ok(PcmStream::mono(samples, target_hz))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub window_ms: u32,
    pub hop_ms: u32,
    pub mel_bins: usize,
    pub fft_size: usize,
    pub fmin_hz: f32,
    pub fmax_hz: f32,
    pub log_floor: f32,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            window_ms: 25,
            hop_ms: 10,
            mel_bins: MEL_BINS,
            fft_size: 512,
            fmin_hz: 125.0,
            fmax_hz: 7500.0,
            log_floor: 1e-6,
        }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        (CANONICAL_RATE as usize * self.window_ms as usize) / 1000
    }

    pub fn hop_samples(&self) -> usize {
        (CANONICAL_RATE as usize * self.hop_ms as usize) / 1000
    }

    pub fn validate(&self) -> Result<(), FrontendError> {
        let bad = |m: &str| Err(FrontendError::InvalidConfig(m.to_string()));
        if self.mel_bins != MEL_BINS {
            return bad("mel_bins must be 32");
        }
        if self.hop_ms * 64 != 640 {
            return bad("hop_ms must be 10 (64 hops = 640 ms detector cadence)");
        }
        if self.window_samples() == 0 || self.window_samples() > self.fft_size {
            return bad("window must be non-empty and fit in fft_size");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        if !(0.0 <= self.fmin_hz && self.fmin_hz < self.fmax_hz)
            || self.fmax_hz > CANONICAL_RATE as f32 / 2.0
        {
            return bad("need 0 <= fmin < fmax <= Nyquist");
        }
        Ok(())
    }

    /// Closed-form frame count for `n` samples.
    pub fn frame_count(&self, n: usize) -> usize {
        let w = self.window_samples();
        if n < w {
            0
        } else {
            (n - w) / self.hop_samples() + 1
        }
    }
}

/// One 32-coefficient log-Mel vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMelFrame {
    pub coeffs: [f32; MEL_BINS],
    pub frame_index: u64,
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the triangular filters.
pub fn mel_center_frequencies(cfg: &FrontendConfig) -> Vec<f64> {
    let edges = mel_edges(cfg);
    edges[1..=cfg.mel_bins].to_vec()
}

fn mel_edges(cfg: &FrontendConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin_hz as f64);
    let hi = hz_to_mel(cfg.fmax_hz as f64);
    (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect()
}

/// Sparse triangular filter: first FFT bin and its weights.
#[derive(Debug, Clone)]
struct MelFilter {
    start: usize,
    weights: Vec<f32>,
}

fn mel_filterbank(cfg: &FrontendConfig) -> Vec<MelFilter> {
    let edges = mel_edges(cfg);
    let n_bins = cfg.fft_size / 2 + 1;
    let bin_hz = CANONICAL_RATE as f64 / cfg.fft_size as f64;
    (0..cfg.mel_bins)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut start = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > l && f < c {
                    (f - l) / (c - l)
                } else if f >= c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                if w > 0.0 {
                    start.get_or_insert(k);
                    weights.push(w as f32);
                } else if start.is_some() {
                    break;
                }
            }
            MelFilter {
                start: start.unwrap_or(0),
                weights,
            }
        })
        .collect()
}

/// Reusable log-Mel extractor with a cached FFT plan, Hann window and filterbank.
pub struct LogMelExtractor {
    cfg: FrontendConfig,
    window: Vec<f32>,
    filters: Vec<MelFilter>,
    fft: Arc<dyn Fft<f32>>,
    log_floor_value: f32,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl LogMelExtractor {
    pub fn new(cfg: FrontendConfig) -> Result<Self, FrontendError> {
        cfg.validate()?;
        let n = cfg.window_samples();
        // Periodic Hann.
        let window = (0..n)
            .map(|i| {
                let x = std::f64::consts::TAU * i as f64 / n as f64;
                (0.5 - 0.5 * x.cos()) as f32
            })
            .collect();
        let filters = mel_filterbank(&cfg);
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let log_floor_value = cfg.log_floor.ln();
        Ok(Self {
            cfg,
            window,
            filters,
            fft,
            log_floor_value,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// Value every coefficient takes on digital silence.
    pub fn silence_value(&self) -> f32 {
        self.log_floor_value
    }

    fn frame_into(&self, samples: &[i16], buf: &mut [Complex32], out: &mut [f32; MEL_BINS]) {
        for (slot, (s, w)) in buf.iter_mut().zip(samples.iter().zip(&self.window)) {
            *slot = Complex32::new(*s as f32 / 32768.0 * w, 0.0);
        }
        for slot in buf[samples.len()..].iter_mut() {
            *slot = Complex32::new(0.0, 0.0);
        }
        self.fft.process(buf);
        for (o, f) in out.iter_mut().zip(&self.filters) {
            let energy: f32 = f
                .weights
                .iter()
                .zip(&buf[f.start..])
                .map(|(w, c)| w * c.norm_sqr())
                .sum();
            let e = if energy.is_finite() { energy } else { f32::MAX };
            *o = e.max(self.cfg.log_floor).ln();
        }
    }

    /// Frames a canonical stream: `floor((n - window) / hop) + 1` frames.
    pub fn frames(&self, stream: &PcmStream) -> Result<Vec<LogMelFrame>, FrontendError> {
        if !stream.is_canonical() {
            return Err(FrontendError::NotCanonical {
                rate: stream.sample_rate,
                channels: stream.channels,
            });
        }
        self.frames_from_samples(&stream.samples, 0)
    }

    /// Frames raw canonical samples, numbering frames from `first_index`.
    pub fn frames_from_samples(
        &self,
        samples: &[i16],
        first_index: u64,
    ) -> Result<Vec<LogMelFrame>, FrontendError> {
        let w = self.cfg.window_samples();
        let hop = self.cfg.hop_samples();
        if samples.len() < w {
            return Err(FrontendError::TooShort {
                samples: samples.len(),
                window: w,
            });
        }
        let n_frames = self.cfg.frame_count(samples.len());
        let mut buf = vec![Complex32::new(0.0, 0.0); self.cfg.fft_size];
        let mut out = Vec::with_capacity(n_frames);
        for i in 0..n_frames {
            let mut coeffs = [0f32; MEL_BINS];
            self.frame_into(&samples[i * hop..i * hop + w], &mut buf, &mut coeffs);
            out.push(LogMelFrame {
                coeffs,
                frame_index: first_index + i as u64,
            });
        }
        Ok(out)
    }
}

/// Convenience wrapper: one-shot log-Mel extraction.
pub fn log_mel_frames(
    stream: &PcmStream,
    cfg: &FrontendConfig,
) -> Result<Vec<LogMelFrame>, FrontendError> {
    LogMelExtractor::new(cfg.clone())?.frames(stream)
}

/// Incremental framer for unbounded streams. Single owner per stream.
#[derive(Debug)]
pub struct StreamingFramer {
    extractor: LogMelExtractor,
    pending: Vec<i16>,
    next_index: u64,
}

impl StreamingFramer {
    pub fn new(cfg: FrontendConfig) -> Result<Self, FrontendError> {
        Ok(Self {
            extractor: LogMelExtractor::new(cfg)?,
            pending: Vec::new(),
            next_index: 0,
        })
    }

    /// Appends samples and returns every frame that became complete.
    pub fn push(&mut self, samples: &[i16]) -> Vec<LogMelFrame> {
        self.pending.extend_from_slice(samples);
        let w = self.extractor.cfg.window_samples();
        let hop = self.extractor.cfg.hop_samples();
        if self.pending.len() < w {
            return Vec::new();
        }
        let frames = self
            .extractor
            .frames_from_samples(&self.pending, self.next_index)
            .expect("pending holds at least one window");
        self.next_index += frames.len() as u64;
        self.pending.drain(..frames.len() * hop);
        frames
    }

    pub fn frames_emitted(&self) -> u64 {
        self.next_index
    }
}
