//! Continuous on-device music recognition.
//!
//! The pipeline has three stages:
//!
//! 1. [`musdet`]: a tiny separable-convolution network scores music presence
//!    every 640 ms and a smoothing gate decides when to wake the recognizer.
//! 2. [`nnfp`]: a convolutional embedder with a divide-and-encode head turns
//!    each second of audio into a unit-norm fingerprint.
//! 3. [`fpindex`] + [`seqmatch`]: an IVF-PQ index finds nearby fingerprints
//!    and a density-adaptive sequence matcher picks (or rejects) the song.
//!
//! [`dbstore`] persists the quantized catalogue, [`synth`] generates seeded
//! audio for training and evaluation, and [`eval`] computes the
//! precision/recall and detector trade-off tables.

pub mod config;
pub mod dbstore;
pub mod eval;
pub mod fpindex;
pub mod frontend;
pub mod kmeans;
pub mod musdet;
pub mod nn;
pub mod nnfp;
pub mod pipeline;
pub mod seqmatch;
pub mod synth;
pub mod weights;

pub use config::PipelineConfig;
pub use dbstore::{build_db, load_db, Database, SongMeta, SongRecord, StorageReport};
pub use fpindex::{IvfPqIndex, PartitionerModel, PqCodebook, QuantizedFingerprint, SearchHit};
pub use frontend::{LogMelFrame, PcmStream, MEL_BINS};
pub use musdet::{DetectorTopology, DetectorWeights, GateConfig, StreamingDetector};
pub use nnfp::{EmbedderTopology, EmbedderWeights, Fingerprint};
pub use pipeline::{DetectionEvent, Recognizer};
pub use seqmatch::{DensityModel, MatchResult, MatcherConfig, SequenceCandidate};
