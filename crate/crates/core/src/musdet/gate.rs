use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::DetectorError;

/// Seconds between detector predictions (64 frames at a 10 ms hop).
pub const PREDICTION_PERIOD_S: f64 = 0.64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    /// Smoothed confidence must exceed this.
    pub threshold: f64,
    /// Consecutive smoothed predictions above threshold needed to fire.
    pub consecutive: usize,
    pub smoothing_window_s: f64,
    pub refractory_s: f64,
    /// Seconds of audio handed to the recognizer per event.
    pub buffer_len_s: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            consecutive: 3,
            smoothing_window_s: 4.0,
            refractory_s: 60.0,
            buffer_len_s: 8.0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.threshold >= 0.0 && self.threshold <= 1.0) {
            return Err(DetectorError::InvalidGate("threshold must be in [0, 1]".into()));
        }
        if self.consecutive == 0 {
            return Err(DetectorError::InvalidGate("consecutive must be >= 1".into()));
        }
        if !(self.smoothing_window_s >= 0.0 && self.refractory_s >= 0.0 && self.buffer_len_s > 0.0) {
            return Err(DetectorError::InvalidGate(
                "window, refractory and buffer lengths must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Number of predictions averaged by the smoother (at least one).
    pub fn smoothing_len(&self) -> usize {
        ((self.smoothing_window_s / PREDICTION_PERIOD_S).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateTrigger {
    /// Index of the triggering prediction in the stream.
    pub index: usize,
    pub time_s: f64,
    /// Mean of the smoothed confidences over the triggering run.
    pub mean_confidence: f64,
}

/// Sliding-mean smoother plus c-consecutive threshold with refractory hold.
#[derive(Debug, Clone)]
pub struct Gate {
    cfg: GateConfig,
    window: VecDeque<f64>,
    window_sum: f64,
    run: Vec<f64>,
    last_fire: Option<f64>,
    index: usize,
}

impl Gate {
    pub fn new(cfg: GateConfig) -> Self {
        Self {
            cfg,
            window: VecDeque::new(),
            window_sum: 0.0,
            run: Vec::new(),
            last_fire: None,
            index: 0,
        }
    }

    pub fn config(&self) -> &GateConfig {
        &self.cfg
    }

    /// Feeds a prediction made at `time_s`.
    pub fn push(&mut self, time_s: f64, probability: f64) -> Option<GateTrigger> {
        let index = self.index;
        self.index += 1;
        self.window.push_back(probability);
        self.window_sum += probability;
        if self.window.len() > self.cfg.smoothing_len() {
            self.window_sum -= self.window.pop_front().unwrap();
        }
        let smoothed = self.window_sum / self.window.len() as f64;
        if let Some(last) = self.last_fire {
            if time_s - last < self.cfg.refractory_s {
                return None;
            }
        }
        if smoothed > self.cfg.threshold {
            self.run.push(smoothed);
        } else {
            self.run.clear();
        }
        if self.run.len() >= self.cfg.consecutive {
            let mean_confidence = self.run.iter().sum::<f64>() / self.run.len() as f64;
            self.run.clear();
            self.last_fire = Some(time_s);
            return Some(GateTrigger {
                index,
                time_s,
                mean_confidence,
            });
        }
        None
    }
}

/// Runs the gate over a prediction stream at the 640 ms cadence; prediction
/// `i` is stamped `i * 0.64` s.
pub fn smooth_and_gate(predictions: &[f64], cfg: &GateConfig) -> Vec<GateTrigger> {
    let mut gate = Gate::new(cfg.clone());
    predictions
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| gate.push(i as f64 * PREDICTION_PERIOD_S, p))
        .collect()
}
