use std::collections::VecDeque;

use super::model::DetectorWeights;
use super::KERNEL;
use crate::frontend::LogMelFrame;
use crate::nn::sigmoid;

/// Ring of the last `KERNEL` input vectors of one conv layer.
#[derive(Debug, Clone)]
struct LayerState {
    ring: Vec<Vec<f64>>,
    /// Inputs received so far.
    seen: u64,
    scale: Vec<f64>,
    shift: Vec<f64>,
}

impl LayerState {
    fn push(&mut self, v: &[f64]) {
        let slot = (self.seen % KERNEL as u64) as usize;
        self.ring[slot].copy_from_slice(v);
        self.seen += 1;
    }

    /// Rows of the current receptive field, oldest first.
    fn rows(&self) -> [&[f64]; KERNEL] {
        let base = self.seen - KERNEL as u64;
        std::array::from_fn(|k| &self.ring[((base + k as u64) % KERNEL as u64) as usize][..])
    }

    /// A stride-2 layer fires on every second input once four are buffered.
    fn ready(&self) -> bool {
        self.seen >= KERNEL as u64 && (self.seen - KERNEL as u64) % 2 == 0
    }
}

/// Incremental detector inference. Each layer keeps only the vectors its
/// next output needs; a prediction is emitted once 446 frames have arrived
/// and then every 64 frames. Single owner per audio stream.
#[derive(Debug, Clone)]
pub struct StreamingDetector {
    weights: DetectorWeights,
    layers: Vec<LayerState>,
    tail: VecDeque<Vec<f64>>,
    frames: u64,
    scratch: Vec<f64>,
}

impl StreamingDetector {
    pub fn new(weights: &DetectorWeights) -> Self {
        let c = weights.topology.channels;
        let layers = weights
            .convs
            .iter()
            .map(|l| {
                let (scale, shift) = l.affine();
                LayerState {
                    ring: vec![vec![0.0; c]; KERNEL],
                    seen: 0,
                    scale,
                    shift,
                }
            })
            .collect();
        Self {
            weights: weights.clone(),
            layers,
            tail: VecDeque::with_capacity(weights.topology.final_len),
            frames: 0,
            scratch: vec![0.0; c],
        }
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.seen = 0;
        }
        self.tail.clear();
        self.frames = 0;
    }

    /// Feeds one frame; returns a probability when a new prediction is due.
    pub fn push(&mut self, frame: &LogMelFrame) -> Option<f64> {
        let c = self.weights.topology.channels;
        self.frames += 1;
        let mut v: Vec<f64> = frame.coeffs[..c].iter().map(|&x| x as f64).collect();
        for (l, state) in self.layers.iter_mut().enumerate() {
            state.push(&v);
            if !state.ready() {
                return None;
            }
            self.weights.convs[l].step(state.rows(), &state.scale, &state.shift, &mut self.scratch);
            v.copy_from_slice(&self.scratch);
        }
        if self.tail.len() == self.weights.topology.final_len {
            self.tail.pop_front();
        }
        self.tail.push_back(v);
        if self.tail.len() < self.weights.topology.final_len {
            return None;
        }
        let flat: Vec<f64> = self.tail.iter().flatten().copied().collect();
        Some(self.head(&flat))
    }

    fn head(&self, flat: &[f64]) -> f64 {
        let w = &self.weights;
        let n = flat.len();
        let (hs, ht) = w.hidden.affine();
        let hidden: Vec<f64> = (0..w.topology.hidden)
            .map(|o| {
                let z = w.hidden.weight[o * n..(o + 1) * n]
                    .iter()
                    .zip(flat)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + w.hidden.bias[o];
                (hs[o] * z + ht[o]).max(0.0)
            })
            .collect();
        let logit = w
            .output
            .weight
            .iter()
            .zip(&hidden)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + w.output.bias[0];
        sigmoid(logit)
    }
}
