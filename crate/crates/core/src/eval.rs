//! Evaluation: precision/recall sweeps for the matcher and the recall vs.
//! false-positive trade-off of the music gate.

use serde::{Deserialize, Serialize};

use crate::frontend::{FrontendConfig, FrontendError, LogMelExtractor, PcmStream};
use crate::musdet::{DetectorWeights, GateConfig, StreamingDetector};
use crate::seqmatch::{MatchResult, QueryAnalysis, Scorer};
use crate::synth::MusicRegion;

/// A match is correct when the song agrees and the alignment is within this
/// many seconds of the truth.
pub const OFFSET_TOLERANCE_S: f64 = 1.0;

/// Ground truth of a query that is in the DB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub song_id: u32,
    pub offset_s: f64,
}

/// One evaluated query; `truth` is `None` for queries that should be
/// rejected (noise, songs outside the DB).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub truth: Option<Truth>,
    pub analysis: QueryAnalysis,
}

/// CSV row `dimension,threshold,precision,recall,scorer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrRow {
    pub dimension: usize,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub scorer: String,
}

/// Precision, recall and false-accept rate of one decision rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub precision: f64,
    pub recall: f64,
    /// Accepted fraction of queries without truth.
    pub false_accept_rate: f64,
    pub accepted: usize,
    pub correct: usize,
}

pub fn is_correct(result: &MatchResult, truth: Option<&Truth>) -> bool {
    match (result.accepted, truth) {
        (true, Some(t)) => {
            result.song_id == Some(t.song_id) && (result.offset_s - t.offset_s).abs() <= OFFSET_TOLERANCE_S
        }
        _ => false,
    }
}

/// Scores `decide` over `queries`. With nothing accepted, precision is 1.
pub fn operating_point(queries: &[EvalQuery], decide: impl Fn(&QueryAnalysis) -> MatchResult) -> OperatingPoint {
    let (mut accepted, mut correct, mut false_accepts) = (0, 0, 0);
    let positives = queries.iter().filter(|q| q.truth.is_some()).count();
    let negatives = queries.len() - positives;
    for q in queries {
        let r = decide(&q.analysis);
        if r.accepted {
            accepted += 1;
            if q.truth.is_none() {
                false_accepts += 1;
            }
        }
        if is_correct(&r, q.truth.as_ref()) {
            correct += 1;
        }
    }
    OperatingPoint {
        precision: if accepted == 0 { 1.0 } else { correct as f64 / accepted as f64 },
        recall: if positives == 0 { 0.0 } else { correct as f64 / positives as f64 },
        false_accept_rate: if negatives == 0 { 0.0 } else { false_accepts as f64 / negatives as f64 },
        accepted,
        correct,
    }
}

/// Sweeps the acceptance threshold of `scorer` over every distinct best
/// score in `queries`; a query is accepted at threshold `t` when its best
/// score is at least `t` (and, for the adaptive scorer, leads the best other
/// song by more than `theta_gap`). Rows are sorted by threshold.
pub fn pr_sweep(queries: &[EvalQuery], scorer: Scorer, theta_gap: f64, dimension: usize) -> Vec<PrRow> {
    // (best score, passes the gap rule, correct if accepted)
    let mut best: Vec<(f64, bool, bool)> = Vec::new();
    let positives = queries.iter().filter(|q| q.truth.is_some()).count();
    for q in queries {
        let Some((b, rival)) = q.analysis.best(scorer) else { continue };
        let score = match scorer {
            Scorer::Adaptive => b.adaptive,
            Scorer::Naive => b.naive,
        };
        let eligible = scorer == Scorer::Naive || score - rival > theta_gap || rival == 0.0;
        let correct = q.truth.is_some_and(|t| {
            b.candidate.song_id == t.song_id
                && (b.candidate.start_offset_s as f64 - t.offset_s).abs() <= OFFSET_TOLERANCE_S
        });
        best.push((score, eligible, correct));
    }
    let mut thresholds: Vec<f64> = best.iter().map(|b| b.0).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds
        .into_iter()
        .map(|t| {
            let accepted: Vec<_> = best.iter().filter(|b| b.1 && b.0 >= t).collect();
            let correct = accepted.iter().filter(|b| b.2).count();
            PrRow {
                dimension,
                threshold: t,
                precision: if accepted.is_empty() { 1.0 } else { correct as f64 / accepted.len() as f64 },
                recall: if positives == 0 { 0.0 } else { correct as f64 / positives as f64 },
                scorer: scorer.name().to_string(),
            }
        })
        .collect()
}

/// Interpolated precision: the best precision of any row reaching `recall`.
pub fn precision_at_recall(rows: &[PrRow], recall: f64) -> Option<f64> {
    rows.iter()
        .filter(|r| r.recall >= recall)
        .map(|r| r.precision)
        .max_by(f64::total_cmp)
}

/// Largest recall any row reaches.
pub fn max_recall(rows: &[PrRow]) -> f64 {
    rows.iter().map(|r| r.recall).fold(0.0, f64::max)
}

/// `from, from + step, ...` up to and including `to` (with a little slack
/// for rounding).
pub fn recall_levels(from: f64, to: f64, step: f64) -> Vec<f64> {
    let n = ((to - from) / step + 1e-9).floor();
    if n < 0.0 {
        return Vec::new();
    }
    (0..=n as usize).map(|i| from + i as f64 * step).collect()
}

/// Detector probability at each prediction, stamped with the end time of the
/// audio it covers.
pub fn detector_predictions(
    weights: &DetectorWeights,
    frontend: &FrontendConfig,
    pcm: &PcmStream,
) -> Result<Vec<(f64, f64)>, FrontendError> {
    let pcm = pcm.clone().canonicalize()?;
    let extractor = LogMelExtractor::new(frontend.clone())?;
    let (win, hop) = (frontend.window_samples(), frontend.hop_samples());
    let mut det = StreamingDetector::new(weights);
    let mut out = Vec::new();
    // Bounded memory on long files: frame 60 s at a time.
    let chunk = 6000 * hop;
    let mut start = 0;
    while start + win <= pcm.samples.len() {
        let end = (start + chunk + win - hop).min(pcm.samples.len());
        let first_frame = (start / hop) as u64;
        for f in extractor.frames_from_samples(&pcm.samples[start..end], first_frame)? {
            if let Some(p) = det.push(&f) {
                let t = (f.frame_index as usize * hop + win) as f64 / 16_000.0;
                out.push((t, p));
            }
        }
        start += chunk;
    }
    Ok(out)
}

/// One `(threshold, consecutive)` operating point of the gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorRow {
    pub threshold: f64,
    pub consecutive: usize,
    pub recall: f64,
    pub false_positives: usize,
    pub fp_per_hour: f64,
}

/// Recall over music regions and false positives per hour for each
/// `(threshold, consecutive)` pair, from one prediction stream.
///
/// The gate is "open" at a prediction when the last `c` smoothed values all
/// exceed the threshold. A region counts as detected when the gate is open
/// at some prediction inside `[start, end + lag]`, where `lag` covers the
/// detector window and the smoothing window. A false positive is a
/// refractory-length time bin (fixed grid from the stream start; the real
/// gate wakes at most once per refractory period) holding an opening outside
/// every region window; the count is normalized by the non-music duration.
/// Since the open set only shrinks as `t` or `c` grow, both measures are
/// non-increasing in each.
pub fn detector_sweep(
    predictions: &[(f64, f64)],
    regions: &[MusicRegion],
    duration_s: f64,
    gate: &GateConfig,
    detector_window_s: f64,
    thresholds: &[f64],
    consecutive: &[usize],
) -> Vec<DetectorRow> {
    let smoothed = smooth(predictions, gate.smoothing_len());
    let lag = detector_window_s + gate.smoothing_window_s;
    let region_of = |t: f64| regions.iter().position(|r| t >= r.start_s && t <= r.end_s + lag);
    let music_s: f64 = regions.iter().map(|r| r.end_s + lag - r.start_s).sum();
    let quiet_h = ((duration_s - music_s) / 3600.0).max(1e-9);
    let bin_s = if gate.refractory_s > 0.0 { gate.refractory_s } else { crate::musdet::PREDICTION_PERIOD_S };
    let mut rows = Vec::new();
    for &c in consecutive {
        for &t in thresholds {
            let mut detected = vec![false; regions.len()];
            let mut false_bins = std::collections::BTreeSet::new();
            let mut run = 0usize;
            for (&(time, _), &s) in predictions.iter().zip(&smoothed) {
                run = if s > t { run + 1 } else { 0 };
                if run < c.max(1) {
                    continue;
                }
                match region_of(time) {
                    Some(r) => detected[r] = true,
                    None => {
                        false_bins.insert((time / bin_s).floor() as u64);
                    }
                }
            }
            let hits = detected.iter().filter(|&&d| d).count();
            rows.push(DetectorRow {
                threshold: t,
                consecutive: c,
                recall: if regions.is_empty() { 0.0 } else { hits as f64 / regions.len() as f64 },
                false_positives: false_bins.len(),
                fp_per_hour: false_bins.len() as f64 / quiet_h,
            });
        }
    }
    rows.sort_by(|a, b| a.consecutive.cmp(&b.consecutive).then(a.threshold.total_cmp(&b.threshold)));
    rows
}

/// Trailing mean over `len` predictions (fewer at the start).
fn smooth(predictions: &[(f64, f64)], len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(predictions.len());
    let mut sum = 0.0;
    for i in 0..predictions.len() {
        sum += predictions[i].1;
        if i >= len {
            sum -= predictions[i - len].1;
        }
        out.push(sum / (i + 1).min(len) as f64);
    }
    out
}
