//! Neural-network fingerprinter.
//!
//! A stack of stride-2 3x3 convolutions (batch norm + ELU) over a 96-frame
//! log-Mel window feeds a two-level divide-and-encode head: the flattened
//! features are split into independent branches, each mapped through a
//! hidden layer and a final linear encoder, and the concatenated branch
//! outputs are L2-normalized into a `d`-dimensional fingerprint.

mod model;
mod train;
mod triplet;

pub use model::{Conv2d, EmbedderWeights, EncodeHead};
pub use train::{
    train_embedder, AlignedCorpus, EmbedderTrainConfig, EmbedderTrainReport, SegmentPair, TRAIN_EXCERPT_S,
};
pub use triplet::{mine_triplets, triplet_loss, SegmentLabel, Triplet, TripletBatch};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::weights::WeightsError;

/// Frames between consecutive fingerprints (one per second at a 10 ms hop).
pub const FINGERPRINT_HOP_FRAMES: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedderError {
    #[error("fingerprint window must be {expected} frames, got {found}")]
    WrongWindow { expected: usize, found: usize },
    #[error("stream of {found} frames is shorter than the {window}-frame window")]
    StreamTooShort { found: usize, window: usize },
    #[error("non-finite value in fingerprinter input")]
    NonFinite,
    #[error("feature length {features} does not split into {branches} branches")]
    IndivisibleSplit { features: usize, branches: usize },
    #[error("no valid positive pair in batch")]
    NoPositivePair,
    #[error("no negative available for an anchor in batch")]
    NoNegative,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

/// Unit-norm embedding of one second of audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub values: Vec<f32>,
    pub song_id: Option<u32>,
    /// Start of the analysed window, seconds from the start of the stream.
    pub offset_s: f64,
}

impl Fingerprint {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Shape of the embedding network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderTopology {
    pub input_frames: usize,
    pub mel_bins: usize,
    /// Output channels of each 3x3 stride-2 conv layer.
    pub conv_channels: Vec<usize>,
    pub branches: usize,
    /// Hidden width of each divide-and-encode branch.
    pub branch_hidden: usize,
    /// Fingerprint dimension `d`.
    pub dim: usize,
}

impl Default for EmbedderTopology {
    fn default() -> Self {
        Self {
            input_frames: 96,
            mel_bins: 32,
            conv_channels: vec![16, 32, 32, 64],
            branches: 8,
            branch_hidden: 32,
            dim: 96,
        }
    }
}

/// Spatial size after a 3x3, stride-2, pad-1 convolution.
pub(crate) fn conv_out(n: usize) -> usize {
    (n - 1) / 2 + 1
}

impl EmbedderTopology {
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    /// `(channels, time, mel)` of the input and of every conv output.
    pub fn feature_maps(&self) -> Vec<(usize, usize, usize)> {
        let mut maps = vec![(1, self.input_frames, self.mel_bins)];
        for &c in &self.conv_channels {
            let (_, h, w) = *maps.last().unwrap();
            maps.push((c, conv_out(h), conv_out(w)));
        }
        maps
    }

    pub fn flat_len(&self) -> usize {
        let (c, h, w) = *self.feature_maps().last().unwrap();
        c * h * w
    }

    pub fn validate(&self) -> Result<(), EmbedderError> {
        let bad = |m: String| Err(EmbedderError::Topology(m));
        if self.input_frames == 0 || self.mel_bins == 0 || self.mel_bins > crate::MEL_BINS {
            return bad("input must be non-empty with at most 32 Mel bins".into());
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("need at least one conv layer with non-zero channels".into());
        }
        if self.branches == 0 || self.dim % self.branches != 0 {
            return bad(format!("dim {} not divisible by {} branches", self.dim, self.branches));
        }
        if self.flat_len() % self.branches != 0 {
            return Err(EmbedderError::IndivisibleSplit {
                features: self.flat_len(),
                branches: self.branches,
            });
        }
        if self.branch_hidden == 0 {
            return bad("branch_hidden must be positive".into());
        }
        Ok(())
    }

    /// Fingerprints emitted for a stream of `n_frames`.
    pub fn emissions(&self, n_frames: usize) -> usize {
        if n_frames < self.input_frames {
            0
        } else {
            (n_frames - self.input_frames) / FINGERPRINT_HOP_FRAMES + 1
        }
    }
}
