//! Deterministic synthetic audio: pseudo-songs built from enveloped harmonic
//! tones, several background-noise families, and the augmentations used to
//! make noisy queries (additive noise at a target SNR, gain, reverb, time
//! offsets).
//!
//! Every generator is seeded, and song rendering is prefix-stable: the first
//! `t` seconds of a song are identical regardless of the requested duration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::frontend::{PcmStream, CANONICAL_RATE};

const SR: f64 = CANONICAL_RATE as f64;

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

fn midi_to_hz(m: f64) -> f64 {
    440.0 * 2f64.powf((m - 69.0) / 12.0)
}

/// Adds a decaying harmonic tone into `buf` starting at sample `start`.
#[allow(clippy::too_many_arguments)]
fn add_tone(
    buf: &mut [f32],
    start: usize,
    len: usize,
    f0: f64,
    harmonics: usize,
    rolloff: f64,
    amp: f64,
    decay_s: f64,
) {
    let end = (start + len).min(buf.len());
    if start >= end {
        return;
    }
    let attack = (0.01 * SR) as usize;
    let release = (0.03 * SR) as usize;
    let decay = (-1.0 / (decay_s * SR)).exp();
    for h in 1..=harmonics {
        let f = f0 * h as f64;
        if f >= 7000.0 {
            break;
        }
        let w = std::f64::consts::TAU * f / SR;
        let a_h = amp / (h as f64).powf(rolloff);
        let c = 2.0 * w.cos();
        // y[n] = sin(w n) via the two-term recurrence.
        let (mut y1, mut y2) = (0.0f64, -w.sin());
        let mut env = 1.0f64;
        for (n, slot) in buf[start..end].iter_mut().enumerate() {
            let y = c * y1 - y2;
            y2 = y1;
            y1 = y;
            let mut g = env;
            if n < attack {
                g *= n as f64 / attack as f64;
            }
            let remain = len - n;
            if remain < release {
                g *= remain as f64 / release as f64;
            }
            *slot += (a_h * g * y2) as f32;
            env *= decay;
        }
    }
}

const SCALES: [&[i32]; 4] = [
    &[0, 2, 4, 5, 7, 9, 11],
    &[0, 2, 3, 5, 7, 8, 10],
    &[0, 2, 4, 7, 9],
    &[0, 2, 3, 5, 7, 9, 10],
];

fn degree_to_midi(root: i32, scale: &[i32], degree: i32) -> f64 {
    let n = scale.len() as i32;
    let octave = degree.div_euclid(n);
    (root + 12 * octave + scale[degree.rem_euclid(n) as usize]) as f64
}

/// Per-song musical parameters, fixed by the song seed.
#[derive(Debug, Clone)]
struct SongStyle {
    root: i32,
    scale: &'static [i32],
    beat_s: f64,
    melody_harmonics: usize,
    melody_rolloff: f64,
    pad_harmonics: usize,
    drum_pattern: [u8; 8],
}

impl SongStyle {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut drum_pattern = [0u8; 8];
        for (i, slot) in drum_pattern.iter_mut().enumerate() {
            *slot = if i % 4 == 0 {
                1
            } else if rng.random_bool(0.45) {
                rng.random_range(1..=2)
            } else {
                0
            };
        }
        Self {
            root: rng.random_range(45..60),
            scale: SCALES[rng.random_range(0..SCALES.len())],
            beat_s: 60.0 / rng.random_range(80.0..150.0),
            melody_harmonics: rng.random_range(3..7),
            melody_rolloff: rng.random_range(0.7..1.8),
            pad_harmonics: rng.random_range(2..5),
            drum_pattern,
        }
    }
}

/// Renders a deterministic pseudo-song as float samples in [-1, 1].
pub fn render_song_f32(corpus_seed: u64, song_id: u32, duration_s: f64) -> Vec<f32> {
    let n = (duration_s * SR).round() as usize;
    let mut buf = vec![0f32; n];
    let base = mix_seed(corpus_seed, 0x5000_0000 + song_id as u64);
    let style = SongStyle::new(&mut rng_for(base, 0));
    let beat = style.beat_s;

    // Melody: random walk over scale degrees, notes of half a beat to two beats.
    let mut rng = rng_for(base, 1);
    let mut t = 0.0;
    let mut degree = rng.random_range(7..14);
    while t < duration_s {
        let dur = beat * [0.5, 0.5, 1.0, 1.0, 1.5, 2.0][rng.random_range(0..6)];
        degree = (degree + rng.random_range(-3..=3)).clamp(3, 20);
        let rest = rng.random_bool(0.1);
        if !rest {
            let f0 = midi_to_hz(degree_to_midi(style.root + 12, style.scale, degree));
            let amp = rng.random_range(0.05..0.09);
            add_tone(
                &mut buf,
                (t * SR) as usize,
                (dur * SR) as usize,
                f0,
                style.melody_harmonics,
                style.melody_rolloff,
                amp,
                rng.random_range(0.3..1.2),
            );
        }
        t += dur;
    }

    // Bass and pad follow a random chord progression, one chord per bar.
    let mut rng = rng_for(base, 2);
    let bar = 4.0 * beat;
    let mut t = 0.0;
    while t < duration_s {
        let chord = rng.random_range(0..7);
        for b in 0..2 {
            let start = t + b as f64 * 2.0 * beat;
            let f0 = midi_to_hz(degree_to_midi(style.root - 12, style.scale, chord));
            add_tone(
                &mut buf,
                (start * SR) as usize,
                (2.0 * beat * SR) as usize,
                f0,
                3,
                1.0,
                0.06,
                0.6,
            );
        }
        for k in 0..3 {
            let f0 = midi_to_hz(degree_to_midi(style.root, style.scale, chord + 2 * k));
            add_tone(
                &mut buf,
                (t * SR) as usize,
                (bar * SR) as usize,
                f0,
                style.pad_harmonics,
                1.5,
                0.02,
                2.5,
            );
        }
        t += bar;
    }

    // Percussion on an eighth-note grid.
    let mut rng = rng_for(base, 3);
    let step = beat / 2.0;
    let mut i = 0usize;
    loop {
        let t = i as f64 * step;
        if t >= duration_s {
            break;
        }
        let start = (t * SR) as usize;
        match style.drum_pattern[i % 8] {
            1 => add_kick(&mut buf, start),
            2 => add_hat(&mut buf, start, &mut rng),
            _ => {}
        }
        i += 1;
    }
    for s in &mut buf {
        *s = s.clamp(-1.0, 1.0);
    }
    buf
}

fn add_kick(buf: &mut [f32], start: usize) {
    let len = (0.15 * SR) as usize;
    let mut phase = 0.0f64;
    for n in 0..len {
        let Some(slot) = buf.get_mut(start + n) else {
            break;
        };
        let tt = n as f64 / SR;
        let f = 50.0 + 90.0 * (-tt * 30.0).exp();
        phase += std::f64::consts::TAU * f / SR;
        *slot += (0.12 * (-tt * 25.0).exp() * phase.sin()) as f32;
    }
}

fn add_hat(buf: &mut [f32], start: usize, rng: &mut ChaCha8Rng) {
    let len = (0.05 * SR) as usize;
    let mut prev = 0.0f64;
    for n in 0..len {
        let white: f64 = rng.random_range(-1.0..1.0);
        let Some(slot) = buf.get_mut(start + n) else {
            continue;
        };
        // First difference as a crude high-pass.
        let hp = white - prev;
        prev = white;
        *slot += (0.02 * (-(n as f64) / SR * 60.0).exp() * hp) as f32;
    }
}

pub fn to_pcm(samples: &[f32]) -> PcmStream {
    PcmStream::mono(
        samples
            .iter()
            .map(|&s| (s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
            .collect(),
        CANONICAL_RATE,
    )
}

pub fn render_song(corpus_seed: u64, song_id: u32, duration_s: f64) -> PcmStream {
    to_pcm(&render_song_f32(corpus_seed, song_id, duration_s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    Brown,
    Babble,
    Traffic,
    Office,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 6] = [
        NoiseKind::White,
        NoiseKind::Pink,
        NoiseKind::Brown,
        NoiseKind::Babble,
        NoiseKind::Traffic,
        NoiseKind::Office,
    ];
}

/// RBJ biquad.
#[derive(Debug, Clone)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    z: [f64; 2],
}

impl Biquad {
    fn new(kind: u8, f0: f64, q: f64) -> Self {
        let w = std::f64::consts::TAU * f0 / SR;
        let (sw, cw) = w.sin_cos();
        let alpha = sw / (2.0 * q);
        let (b, a0, a1, a2) = match kind {
            // low-pass
            0 => (
                [(1.0 - cw) / 2.0, 1.0 - cw, (1.0 - cw) / 2.0],
                1.0 + alpha,
                -2.0 * cw,
                1.0 - alpha,
            ),
            // band-pass, 0 dB peak
            _ => ([alpha, 0.0, -alpha], 1.0 + alpha, -2.0 * cw, 1.0 - alpha),
        };
        Self {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [a1 / a0, a2 / a0],
            z: [0.0; 2],
        }
    }

    fn run(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normalize_rms(v: &mut [f32], target: f64) {
    let r = rms(v);
    if r > 0.0 {
        let g = (target / r) as f32;
        v.iter_mut().for_each(|s| *s *= g);
    }
}

pub fn rms(v: &[f32]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Unit-RMS noise of the given family.
pub fn render_noise(kind: NoiseKind, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0f32; n];
    match kind {
        NoiseKind::White => out.iter_mut().for_each(|s| *s = gauss(rng) as f32),
        NoiseKind::Pink => {
            // Paul Kellet's economy pink filter.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            for s in &mut out {
                let w = gauss(rng);
                b0 = 0.99765 * b0 + w * 0.0990460;
                b1 = 0.96300 * b1 + w * 0.2965164;
                b2 = 0.57000 * b2 + w * 1.0526913;
                *s = (b0 + b1 + b2 + w * 0.1848) as f32;
            }
        }
        NoiseKind::Brown => {
            let mut acc = 0.0;
            for s in &mut out {
                acc = 0.995 * acc + 0.1 * gauss(rng);
                *s = acc as f32;
            }
        }
        NoiseKind::Babble => {
            // Several band-limited "talkers" with syllable-rate gating.
            for _ in 0..4 {
                let mut bp = Biquad::new(1, rng.random_range(400.0..1800.0), 1.2);
                let rate = rng.random_range(3.0..6.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                for (i, s) in out.iter_mut().enumerate() {
                    let t = i as f64 / SR;
                    let gate = (0.5 + 0.5 * (std::f64::consts::TAU * rate * t + phase).sin()).powi(2);
                    *s += (bp.run(gauss(rng)) * gate) as f32;
                }
            }
        }
        NoiseKind::Traffic => {
            let mut lp = Biquad::new(0, 250.0, 0.7);
            let mut acc = 0.0;
            let rate = rng.random_range(0.05..0.2);
            for (i, s) in out.iter_mut().enumerate() {
                acc = 0.99 * acc + 0.1 * gauss(rng);
                let swell = 1.0 + 0.5 * (std::f64::consts::TAU * rate * i as f64 / SR).sin();
                *s = (lp.run(acc + 0.3 * gauss(rng)) * swell) as f32;
            }
        }
        NoiseKind::Office => {
            let (mut b0, mut b1) = (0.0, 0.0);
            let mut click = 0.0f64;
            for s in &mut out {
                let w = gauss(rng);
                b0 = 0.99765 * b0 + w * 0.0990460;
                b1 = 0.96300 * b1 + w * 0.2965164;
                if rng.random_bool(4.0 / SR) {
                    click = rng.random_range(2.0..6.0);
                }
                click *= 0.995;
                *s = (b0 + b1 + 0.2 * w + click * gauss(rng)) as f32;
            }
        }
    }
    normalize_rms(&mut out, 1.0);
    out
}

/// Cheap Schroeder reverb: four parallel combs into two all-passes.
pub fn reverb(x: &[f32], wet: f32) -> Vec<f32> {
    let combs = [(0.0297, 0.77), (0.0371, 0.75), (0.0411, 0.73), (0.0437, 0.71)];
    let mut acc = vec![0f32; x.len()];
    for (delay_s, g) in combs {
        let d = (delay_s * SR) as usize;
        let mut line = vec![0f32; d];
        for (i, (&s, a)) in x.iter().zip(acc.iter_mut()).enumerate() {
            let y = s + g * line[i % d];
            line[i % d] = y;
            *a += y * 0.25;
        }
    }
    for (delay_s, g) in [(0.005, 0.7f32), (0.0017, 0.7)] {
        let d = (delay_s * SR) as usize;
        let mut line = vec![0f32; d];
        for (i, a) in acc.iter_mut().enumerate() {
            let buf = line[i % d];
            let y = -g * *a + buf;
            line[i % d] = *a + g * y;
            *a = y;
        }
    }
    x.iter()
        .zip(acc)
        .map(|(&d, w)| (1.0 - wet) * d + wet * w)
        .collect()
}

/// One query-style distortion, recorded in corpus manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub noise: NoiseKind,
    pub snr_db: f64,
    pub gain_db: f64,
    pub reverb: bool,
    pub offset_ms: i32,
}

/// SNR levels used for query augmentation.
pub const QUERY_SNRS_DB: [f64; 3] = [20.0, 10.0, 5.0];

impl Augmentation {
    pub fn random(rng: &mut ChaCha8Rng, max_offset_ms: i32) -> Self {
        Self {
            noise: NoiseKind::ALL[rng.random_range(0..NoiseKind::ALL.len())],
            snr_db: QUERY_SNRS_DB[rng.random_range(0..QUERY_SNRS_DB.len())],
            gain_db: rng.random_range(-12.0..6.0),
            reverb: rng.random_bool(0.3),
            offset_ms: if max_offset_ms > 0 {
                rng.random_range(-max_offset_ms..=max_offset_ms)
            } else {
                0
            },
        }
    }

    /// Applies reverb, gain and additive noise to a clean excerpt. The time
    /// offset is the caller's job (it chooses which excerpt to pass).
    pub fn apply(&self, clean: &[f32], rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut x = if self.reverb {
            reverb(clean, 0.3)
        } else {
            clean.to_vec()
        };
        let noise = render_noise(self.noise, x.len(), rng);
        mix_at_snr(&mut x, &noise, self.snr_db);
        let g = 10f64.powf(self.gain_db / 20.0) as f32;
        x.iter_mut().for_each(|s| *s = (*s * g).clamp(-1.0, 1.0));
        x
    }
}

/// Adds `noise` scaled so that `rms(signal) / rms(noise) = snr_db`.
pub fn mix_at_snr(signal: &mut [f32], noise: &[f32], snr_db: f64) {
    let s = rms(signal);
    let n = rms(noise);
    if n == 0.0 {
        return;
    }
    let target = if s > 0.0 { s / 10f64.powf(snr_db / 20.0) } else { 0.0 };
    let g = (target / n) as f32;
    for (x, v) in signal.iter_mut().zip(noise) {
        *x += g * v;
    }
}

/// Extracts `[start_s, start_s + len_s)` from a song render, zero-padded.
pub fn excerpt(song: &[f32], start_s: f64, len_s: f64) -> Vec<f32> {
    let len = (len_s * SR).round() as usize;
    let start = (start_s * SR).round() as i64;
    (0..len as i64)
        .map(|i| {
            let j = start + i;
            if j >= 0 && (j as usize) < song.len() {
                song[j as usize]
            } else {
                0.0
            }
        })
        .collect()
}

/// Where a query clip comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    /// Excerpt of a catalogue song; should be recognized.
    Indexed,
    /// Pure noise; should be rejected.
    Noise,
    /// Excerpt of a song outside the catalogue; should be rejected.
    Heldout,
}

/// A recognition query with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryClip {
    pub samples: Vec<f32>,
    pub source: QuerySource,
    pub song_id: Option<u32>,
    /// Start of the excerpt in the song, seconds.
    pub offset_s: Option<f64>,
    pub augmentation: Option<Augmentation>,
}

/// Seed space for songs that are never indexed.
pub const HELDOUT_SONG_BASE: u32 = 0x2000_0000;

/// `count` distorted excerpts of `song`, each starting on a whole second
/// shifted by the augmentation's jitter of at most `max_jitter_ms`.
pub fn song_queries(
    song: &[f32],
    song_id: u32,
    count: usize,
    len_s: f64,
    max_jitter_ms: i32,
    rng: &mut ChaCha8Rng,
) -> Vec<QueryClip> {
    let song_s = song.len() as f64 / SR;
    let last_start = (song_s - len_s - 1.0).floor().max(0.0) as u32;
    (0..count)
        .map(|_| {
            let aug = Augmentation::random(rng, max_jitter_ms);
            let start = (rng.random_range(0..=last_start) as f64 + aug.offset_ms as f64 / 1000.0).max(0.0);
            let samples = aug.apply(&excerpt(song, start, len_s), rng);
            QueryClip {
                samples,
                source: QuerySource::Indexed,
                song_id: Some(song_id),
                offset_s: Some(start),
                augmentation: Some(aug),
            }
        })
        .collect()
}

/// Noise of the `k`-th kind (cycling) at a moderate level.
pub fn noise_query(k: usize, len_s: f64, rng: &mut ChaCha8Rng) -> QueryClip {
    let kind = NoiseKind::ALL[k % NoiseKind::ALL.len()];
    let mut samples = render_noise(kind, (len_s * SR).round() as usize, rng);
    normalize_rms(&mut samples, 0.1);
    QueryClip {
        samples,
        source: QuerySource::Noise,
        song_id: None,
        offset_s: None,
        augmentation: None,
    }
}

/// Distorted excerpt of song `HELDOUT_SONG_BASE + k`, which no catalogue
/// contains.
pub fn heldout_query(corpus_seed: u64, k: u32, len_s: f64, rng: &mut ChaCha8Rng) -> QueryClip {
    let song = render_song_f32(corpus_seed, HELDOUT_SONG_BASE + k, len_s + 6.0);
    let aug = Augmentation::random(rng, 0);
    QueryClip {
        samples: aug.apply(&excerpt(&song, 5.0, len_s), rng),
        source: QuerySource::Heldout,
        song_id: None,
        offset_s: None,
        augmentation: Some(aug),
    }
}

/// A labelled clip for detector training/evaluation.
#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub audio: PcmStream,
    pub is_music: bool,
}

/// Seed space reserved for detector songs, disjoint from catalogue songs.
const DETECTOR_SONG_BASE: u32 = 0x4000_0000;

/// Music clips: fresh songs at varied loudness, sometimes over noise.
/// Non-music clips: filtered-noise mixtures at varied loudness, or silence.
pub fn detector_clip(rng: &mut ChaCha8Rng, is_music: bool, len_s: f64) -> LabeledClip {
    let n = (len_s * SR).round() as usize;
    let audio = if is_music {
        let id = DETECTOR_SONG_BASE + rng.random_range(0..1_000_000);
        let song = render_song_f32(rng.random(), id, len_s + 5.0);
        let mut x = excerpt(&song, rng.random_range(0.0..5.0), len_s);
        if rng.random_bool(0.6) {
            let kind = NoiseKind::ALL[rng.random_range(0..NoiseKind::ALL.len())];
            let noise = render_noise(kind, n, rng);
            mix_at_snr(&mut x, &noise, rng.random_range(5.0..30.0));
        }
        let level = 10f64.powf(rng.random_range(-40.0..-12.0) / 20.0);
        normalize_rms(&mut x, level);
        x
    } else if rng.random_bool(0.1) {
        vec![0.0; n]
    } else {
        let kind = NoiseKind::ALL[rng.random_range(0..NoiseKind::ALL.len())];
        let mut x = render_noise(kind, n, rng);
        if rng.random_bool(0.4) {
            let other = NoiseKind::ALL[rng.random_range(0..NoiseKind::ALL.len())];
            let y = render_noise(other, n, rng);
            let w = rng.random_range(0.2..1.0) as f32;
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += w * b);
        }
        let level = 10f64.powf(rng.random_range(-60.0..-12.0) / 20.0);
        normalize_rms(&mut x, level);
        x
    };
    LabeledClip {
        audio: to_pcm(&audio),
        is_music,
    }
}

/// A music region embedded in an ambient recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicRegion {
    pub start_s: f64,
    pub end_s: f64,
    pub song_id: u32,
    pub song_offset_s: f64,
    pub snr_db: f64,
}

/// Long ambient recording: a background of alternating noise types and
/// silent stretches, with music regions from `song_ids` mixed in at
/// `region_snrs_db` (cycled).
#[derive(Debug, Clone)]
pub struct AmbientSpec {
    pub seed: u64,
    pub corpus_seed: u64,
    pub duration_s: f64,
    pub song_ids: Vec<u32>,
    pub song_duration_s: f64,
    pub regions: usize,
    pub region_snrs_db: Vec<f64>,
    pub region_len_s: (f64, f64),
}

impl AmbientSpec {
    pub fn new(seed: u64, corpus_seed: u64, duration_s: f64, song_ids: Vec<u32>) -> Self {
        Self {
            seed,
            corpus_seed,
            duration_s,
            song_ids,
            song_duration_s: 240.0,
            regions: 12,
            region_snrs_db: vec![20.0, 15.0, 10.0, 5.0],
            region_len_s: (16.0, 40.0),
        }
    }
}

pub fn render_ambient(spec: &AmbientSpec) -> (PcmStream, Vec<MusicRegion>) {
    let mut rng = rng_for(spec.seed, 0xA3B1);
    let n = (spec.duration_s * SR).round() as usize;
    let mut bg = vec![0f32; n];
    // Background segments of 20-90 s; one in six is digital silence.
    let mut pos = 0usize;
    while pos < n {
        let len = ((rng.random_range(20.0..90.0) * SR) as usize).min(n - pos);
        if !rng.random_bool(1.0 / 6.0) {
            let kind = NoiseKind::ALL[rng.random_range(0..NoiseKind::ALL.len())];
            let mut seg = render_noise(kind, len, &mut rng);
            normalize_rms(&mut seg, 10f64.powf(rng.random_range(-45.0..-22.0) / 20.0));
            bg[pos..pos + len].copy_from_slice(&seg);
        }
        pos += len;
    }
    // Regions evenly spaced, each jittered inside its slot.
    let slot = spec.duration_s / spec.regions.max(1) as f64;
    let mut regions = Vec::new();
    for r in 0..spec.regions {
        if spec.song_ids.is_empty() {
            break;
        }
        let len_s = rng.random_range(spec.region_len_s.0..=spec.region_len_s.1).min(slot * 0.8);
        let start_s = r as f64 * slot + rng.random_range(0.0..(slot - len_s).max(0.0) * 0.5 + 1e-9);
        let song_id = spec.song_ids[rng.random_range(0..spec.song_ids.len())];
        let max_off = (spec.song_duration_s - len_s).max(0.0).floor();
        let song_offset_s = rng.random_range(0.0..=max_off).floor();
        let snr_db = spec.region_snrs_db[r % spec.region_snrs_db.len()];
        let song = render_song_f32(spec.corpus_seed, song_id, song_offset_s + len_s);
        let mut music = excerpt(&song, song_offset_s, len_s);
        let a = (start_s * SR) as usize;
        let b = (a + music.len()).min(n);
        music.truncate(b - a);
        let local = rms(&bg[a..b]);
        if local > 0.0 {
            normalize_rms(&mut music, local * 10f64.powf(snr_db / 20.0));
        } else {
            normalize_rms(&mut music, 0.05);
        }
        for (x, m) in bg[a..b].iter_mut().zip(&music) {
            *x += m;
        }
        regions.push(MusicRegion {
            start_s,
            end_s: start_s + len_s,
            song_id,
            song_offset_s,
            snr_db,
        });
    }
    (to_pcm(&bg), regions)
}
