//! Gatekeeper music detector.
//!
//! A stack of stride-2 separable 1-D convolutions over log-Mel frames
//! (kernel 4, valid padding) halves the time axis at every layer, so the
//! six-layer network consumes a 446-frame window and produces one music
//! probability every 2^6 = 64 frames (640 ms) when run incrementally.
//! A smoothing gate turns the prediction stream into wake-up events.

mod gate;
mod model;
mod streaming;
mod train;

pub use gate::{smooth_and_gate, Gate, GateConfig, GateTrigger, PREDICTION_PERIOD_S};
pub use model::{quantize_weights, DenseLayer, DetectorWeights, ForwardTrace, SepConv};
pub use streaming::StreamingDetector;
pub use train::{accuracy, synthetic_corpus, train_detector, DetectorTrainConfig, LabeledFrames, TrainReport};

use thiserror::Error;

use crate::weights::WeightsError;

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("detector window must be {expected} frames, got {found}")]
    WrongWindow { expected: usize, found: usize },
    #[error("non-finite value in detector input")]
    NonFinite,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("clip {index} has {frames} frames, fewer than the {window}-frame window")]
    ClipTooShort {
        index: usize,
        frames: usize,
        window: usize,
    },
    #[error("invalid gate config: {0}")]
    InvalidGate(String),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

/// Shape of the detector network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorTopology {
    /// Feature channels (= Mel bins) carried through every conv layer.
    pub channels: usize,
    pub conv_layers: usize,
    /// Time length seen by the flatten layer.
    pub final_len: usize,
    /// Width of the hidden dense layer.
    pub hidden: usize,
}

impl Default for DetectorTopology {
    fn default() -> Self {
        Self {
            channels: 32,
            conv_layers: 6,
            final_len: 5,
            hidden: 8,
        }
    }
}

impl DetectorTopology {
    /// Input length of every conv layer followed by the flatten length,
    /// e.g. `[446, 222, 110, 54, 26, 12, 5]`.
    pub fn layer_lengths(&self) -> Vec<usize> {
        let mut lens = vec![self.final_len];
        for _ in 0..self.conv_layers {
            let next = (lens[0] - 1) * STRIDE + KERNEL;
            lens.insert(0, next);
        }
        lens
    }

    pub fn window(&self) -> usize {
        self.layer_lengths()[0]
    }

    /// Frames between consecutive streaming predictions.
    pub fn hop(&self) -> usize {
        STRIDE.pow(self.conv_layers as u32)
    }

    pub fn flat_len(&self) -> usize {
        self.final_len * self.channels
    }

    pub fn conv_parameter_count(&self) -> usize {
        let c = self.channels;
        KERNEL * c + c * c + c
    }

    /// Trainable parameters, optionally counting batch-norm scale and shift.
    pub fn parameter_count(&self, include_batch_norm: bool) -> usize {
        let bn = |c: usize| if include_batch_norm { 2 * c } else { 0 };
        let conv = self.conv_layers * (self.conv_parameter_count() + bn(self.channels));
        let hidden = self.flat_len() * self.hidden + self.hidden + bn(self.hidden);
        let out = self.hidden + 1;
        conv + hidden + out
    }

    /// Number of predictions a stream of `n_frames` yields.
    pub fn emissions(&self, n_frames: usize) -> usize {
        if n_frames < self.window() {
            0
        } else {
            (n_frames - self.window()) / self.hop() + 1
        }
    }
}

/// Trainable parameter count of `t` (batch-norm folded away).
pub fn parameter_count(t: &DetectorTopology) -> usize {
    t.parameter_count(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_chain_reproduces_the_table() {
        let t = DetectorTopology::default();
        assert_eq!(t.layer_lengths(), vec![446, 222, 110, 54, 26, 12, 5]);
        for w in t.layer_lengths().windows(2) {
            assert_eq!(w[1], (w[0] - KERNEL) / STRIDE + 1);
        }
        assert_eq!(t.flat_len(), 160);
        assert_eq!(t.hop(), 64);
    }

    #[test]
    fn parameter_counts() {
        let t = DetectorTopology::default();
        assert_eq!(t.conv_parameter_count(), 1184);
        assert_eq!(parameter_count(&t), 6 * 1184 + 1288 + 9);
        assert_eq!(parameter_count(&t), 8401);
        let with_bn = t.parameter_count(true);
        assert!(with_bn > 8401 && with_bn < 9000, "{with_bn}");
    }

    #[test]
    fn emission_count_formula() {
        let t = DetectorTopology::default();
        assert_eq!(t.emissions(445), 0);
        assert_eq!(t.emissions(446), 1);
        assert_eq!(t.emissions(446 + 128), 3);
    }
}
