//! Deterministic fixtures shared by the benchmarks.

use rand::Rng;
use tunewake::frontend::{FrontendConfig, LogMelExtractor};
use tunewake::fpindex::IndexConfig;
use tunewake::synth::{render_song, rng_for};
use tunewake::{IvfPqIndex, LogMelFrame, PcmStream};

pub const SEED: u64 = 0xBE7C;

/// `seconds` of a synthetic song at 16 kHz.
pub fn song(seconds: f64) -> PcmStream {
    render_song(SEED, 0, seconds)
}

pub fn frames(seconds: f64) -> Vec<LogMelFrame> {
    LogMelExtractor::new(FrontendConfig::default())
        .expect("default frontend is valid")
        .frames(&song(seconds))
        .expect("song is longer than one frame")
}

/// Unit vectors, `n x dim`, row-major.
pub fn unit_vectors(n: usize, dim: usize, stream: u64) -> Vec<f32> {
    let mut rng = rng_for(SEED, stream);
    let mut v: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    for row in v.chunks_mut(dim) {
        let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// An index over `n` random fingerprints grouped into 240-step songs.
pub fn random_index(n: usize, dim: usize) -> IvfPqIndex {
    let ids: Vec<(u32, u32)> = (0..n as u32).map(|i| (i / 240, i % 240)).collect();
    let cfg = IndexConfig {
        seed: SEED,
        ..IndexConfig::default()
    };
    IvfPqIndex::build(&unit_vectors(n, dim, 1), dim, &ids, &cfg).expect("valid index parameters")
}
