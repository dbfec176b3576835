//! Second-stage sequence matching.
//!
//! Every query fingerprint's top-K hits vote for a song alignment. The best
//! supported alignments are rescored over the whole query with a kernel
//! whose width is the local density radius of each aligned DB fingerprint,
//! so a given distance counts for more where the DB is sparse. A candidate
//! is accepted only if it clears an absolute score and beats the best other
//! song by a margin.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fpindex::{IndexError, IvfPqIndex, ProbePolicy, SearchHit};
use crate::nnfp::Fingerprint;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("DB has {points} fingerprints; density needs more than k = {k}")]
    DbTooSmall { points: usize, k: usize },
    #[error("alignment {offset_s} s of song {song_id} lies entirely outside the song")]
    AlignmentOutOfBounds { song_id: u32, offset_s: i64 },
    #[error("query has no fingerprints")]
    EmptyQuery,
    #[error("density model covers {found} fingerprints, index has {expected}")]
    DensityMismatch { expected: usize, found: usize },
    #[error("invalid matcher parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    /// Hits retrieved per query fingerprint (K).
    pub top_k: usize,
    pub probe: ProbePolicy,
    /// Candidates rescored per query (C).
    pub max_candidates: usize,
    /// Neighbour rank defining the density radius (k_d).
    pub density_k: usize,
    pub radius_floor: f64,
    /// Same-song neighbours within this many seconds are ignored for density.
    pub density_exclusion_s: u32,
    pub theta_abs: f64,
    pub theta_gap: f64,
    /// Fixed threshold of the plain-L2 baseline scorer.
    pub naive_threshold: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            top_k: 32,
            probe: ProbePolicy::Coverage(0.02),
            max_candidates: 20,
            density_k: 16,
            radius_floor: 1e-3,
            density_exclusion_s: 2,
            theta_abs: 0.45,
            theta_gap: 0.05,
            naive_threshold: 0.8,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        let bad = |m: &str| Err(MatchError::InvalidParameter(m.into()));
        if self.top_k == 0 || self.max_candidates == 0 || self.density_k == 0 {
            return bad("top_k, max_candidates and density_k must be positive");
        }
        match self.probe {
            ProbePolicy::Coverage(f) if !(f > 0.0 && f <= 1.0) => {
                return bad("probe coverage must be in (0, 1]")
            }
            ProbePolicy::Count(0) => return bad("probe count must be positive"),
            _ => {}
        }
        if self.radius_floor <= 0.0 {
            return bad("radius_floor must be positive");
        }
        for t in [self.theta_abs, self.theta_gap, self.naive_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return bad("thresholds must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

/// A (song, alignment) hypothesis and the number of hits voting for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceCandidate {
    pub song_id: u32,
    /// Song offset (whole seconds) aligned with the first query fingerprint.
    pub start_offset_s: i64,
    pub support: u32,
}

/// Per-fingerprint local density radius.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityModel {
    pub k: usize,
    pub radii: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub song_id: Option<u32>,
    pub title: Option<String>,
    pub offset_s: f64,
    pub score: f64,
    pub accepted: bool,
    pub runner_up_score: f64,
}

impl MatchResult {
    pub fn no_match() -> Self {
        Self {
            song_id: None,
            title: None,
            offset_s: 0.0,
            score: 0.0,
            accepted: false,
            runner_up_score: 0.0,
        }
    }
}

/// Each hit at query step `i` votes for `(song, offset - i)`. Candidates are
/// ranked by support (ties: song id, then alignment) and the top
/// `max_candidates` are kept.
pub fn collect_candidates(hits: &[Vec<SearchHit>], max_candidates: usize) -> Vec<SequenceCandidate> {
    let mut votes: BTreeMap<(u32, i64), u32> = BTreeMap::new();
    for (i, step) in hits.iter().enumerate() {
        for h in step {
            *votes.entry((h.song_id, h.offset_s as i64 - i as i64)).or_default() += 1;
        }
    }
    let mut out: Vec<SequenceCandidate> = votes
        .into_iter()
        .map(|((song_id, start_offset_s), support)| SequenceCandidate {
            song_id,
            start_offset_s,
            support,
        })
        .collect();
    out.sort_by(|a, b| {
        b.support
            .cmp(&a.support)
            .then(a.song_id.cmp(&b.song_id))
            .then(a.start_offset_s.cmp(&b.start_offset_s))
    });
    out.truncate(max_candidates);
    out
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Extra neighbours ranked by the fast distance before exact re-ranking.
const RERANK_SLACK: usize = 8;
const DENSITY_BLOCK: usize = 256;

/// Density radius of every DB fingerprint: the exact distance between
/// reconstructions to its `k`-th nearest neighbour, skipping itself and
/// same-song fingerprints within `exclusion_s` seconds, floored at `floor`.
/// Points with fewer than `k` eligible neighbours use the farthest one.
pub fn local_density(index: &IvfPqIndex, k: usize, exclusion_s: u32, floor: f64) -> Result<DensityModel, MatchError> {
    let n = index.len();
    if k == 0 || n < k + 1 {
        return Err(MatchError::DbTooSmall { points: n, k });
    }
    let d = index.dim();
    let x: Vec<f32> = (0..n).flat_map(|i| index.decode(i)).collect();
    let norms: Vec<f32> = x.chunks_exact(d).map(|v| v.iter().map(|a| a * a).sum()).collect();
    let keep = k + RERANK_SLACK;
    let mut radii = Vec::with_capacity(n);
    let mut block = vec![0f32; DENSITY_BLOCK * n];
    let mut row: Vec<(f32, u32)> = Vec::with_capacity(n);
    for i0 in (0..n).step_by(DENSITY_BLOCK) {
        let rows = DENSITY_BLOCK.min(n - i0);
        // block[r, j] = <x_{i0+r}, x_j>
        // SAFETY: the slices cover rows*d, n*d and rows*n elements with the
        // given strides.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                d,
                n,
                1.0,
                x[i0 * d..].as_ptr(),
                d as isize,
                1,
                x.as_ptr(),
                1,
                d as isize,
                0.0,
                block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        for r in 0..rows {
            let i = i0 + r;
            let (song, off) = (index.song_ids[i], index.offsets[i]);
            row.clear();
            for j in 0..n {
                if j == i || (index.song_ids[j] == song && index.offsets[j].abs_diff(off) <= exclusion_s) {
                    continue;
                }
                row.push((norms[i] + norms[j] - 2.0 * block[r * n + j], j as u32));
            }
            let radius = if row.is_empty() {
                0.0
            } else {
                if row.len() > keep {
                    row.select_nth_unstable_by(keep - 1, |a, b| a.0.total_cmp(&b.0));
                    row.truncate(keep);
                }
                let xi = &x[i * d..(i + 1) * d];
                let mut exact: Vec<f32> = row
                    .iter()
                    .map(|&(_, j)| sq_dist(xi, &x[j as usize * d..(j as usize + 1) * d]).sqrt())
                    .collect();
                exact.sort_by(f32::total_cmp);
                exact[(k - 1).min(exact.len() - 1)]
            };
            radii.push(radius.max(floor as f32));
        }
    }
    Ok(DensityModel { k, radii })
}

/// Similarity of each query step to the aligned DB fingerprint:
/// `exp(-|q_i - x~_i|^2 / r_i^2)`, or `None` where the alignment falls
/// outside the song.
pub fn step_similarities(
    query: &[Fingerprint],
    candidate: &SequenceCandidate,
    index: &IvfPqIndex,
    density: &DensityModel,
) -> Result<Vec<Option<f64>>, MatchError> {
    aligned_distances(query, candidate, index).map(|v| {
        v.into_iter()
            .map(|o| {
                o.map(|(dist, i)| {
                    let r = density.radii[i] as f64;
                    (-(dist * dist) / (r * r)).exp()
                })
            })
            .collect()
    })
}

/// `(|q_i - x~_i|, db index)` per step, `None` outside the song.
fn aligned_distances(
    query: &[Fingerprint],
    candidate: &SequenceCandidate,
    index: &IvfPqIndex,
) -> Result<Vec<Option<(f64, usize)>>, MatchError> {
    let out: Vec<Option<(f64, usize)>> = query
        .iter()
        .enumerate()
        .map(|(step, q)| {
            index
                .locate(candidate.song_id, candidate.start_offset_s + step as i64)
                .map(|i| ((sq_dist(&q.values, &index.decode(i)) as f64).sqrt(), i))
        })
        .collect();
    if out.iter().all(Option::is_none) {
        return Err(MatchError::AlignmentOutOfBounds {
            song_id: candidate.song_id,
            offset_s: candidate.start_offset_s,
        });
    }
    Ok(out)
}

/// Mean similarity over every query step, in `[0, 1]`. Steps whose
/// alignment falls outside the song have no DB fingerprint to compare and
/// count as 0, like steps without hits: a candidate that overlaps the song
/// at one step cannot score as if all of them matched.
pub fn score_sequence(
    query: &[Fingerprint],
    candidate: &SequenceCandidate,
    index: &IvfPqIndex,
    density: &DensityModel,
) -> Result<f64, MatchError> {
    Ok(mean_aligned(&step_similarities(query, candidate, index, density)?, None))
}

/// Mean over all steps; steps outside the song or without any hits count
/// as 0.
fn mean_aligned(sims: &[Option<f64>], has_hits: Option<&[bool]>) -> f64 {
    if sims.is_empty() {
        return 0.0;
    }
    let sum: f64 = sims
        .iter()
        .enumerate()
        .filter(|(i, _)| has_hits.is_none_or(|h| h[*i]))
        .filter_map(|(_, s)| *s)
        .sum();
    sum / sims.len() as f64
}

/// Naive baseline similarity `1 - mean(|q_i - x~_i|) / 2`, clamped to `[0, 1]`.
pub fn naive_score(query: &[Fingerprint], candidate: &SequenceCandidate, index: &IvfPqIndex) -> Result<f64, MatchError> {
    let sims: Vec<Option<f64>> = aligned_distances(query, candidate, index)?
        .into_iter()
        .map(|o| o.map(|(dist, _)| (1.0 - dist / 2.0).clamp(0.0, 1.0)))
        .collect();
    Ok(mean_aligned(&sims, None))
}

/// A candidate with both scorers' outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: SequenceCandidate,
    pub adaptive: f64,
    pub naive: f64,
}

/// Which similarity a decision uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Adaptive,
    Naive,
}

impl Scorer {
    pub fn name(self) -> &'static str {
        match self {
            Scorer::Adaptive => "adaptive",
            Scorer::Naive => "naive",
        }
    }

    fn of(self, c: &ScoredCandidate) -> f64 {
        match self {
            Scorer::Adaptive => c.adaptive,
            Scorer::Naive => c.naive,
        }
    }
}

/// Everything the acceptance rules need for one query, computed once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAnalysis {
    pub scored: Vec<ScoredCandidate>,
    pub scanned_fraction: f64,
}

impl QueryAnalysis {
    /// Best candidate under `scorer` (ties: support, song id, alignment) and
    /// the best score of any other song.
    pub fn best(&self, scorer: Scorer) -> Option<(ScoredCandidate, f64)> {
        let best = self.scored.iter().copied().max_by(|a, b| {
            scorer
                .of(a)
                .total_cmp(&scorer.of(b))
                .then(a.candidate.support.cmp(&b.candidate.support))
                .then(b.candidate.song_id.cmp(&a.candidate.song_id))
                .then(b.candidate.start_offset_s.cmp(&a.candidate.start_offset_s))
        })?;
        let runner_up = self
            .scored
            .iter()
            .filter(|c| c.candidate.song_id != best.candidate.song_id)
            .map(|c| scorer.of(c))
            .fold(0.0, f64::max);
        Some((best, runner_up))
    }

    /// Adaptive rule: best score above `theta_abs` and ahead of the best
    /// other song by more than `theta_gap` (no gap test without a rival).
    pub fn decide_adaptive(&self, theta_abs: f64, theta_gap: f64) -> MatchResult {
        let scored: Vec<(SequenceCandidate, f64)> =
            self.scored.iter().map(|c| (c.candidate, c.adaptive)).collect();
        adaptive_accept(&scored, theta_abs, theta_gap)
    }

    /// Baseline rule: best naive score above a fixed threshold.
    pub fn decide_naive(&self, threshold: f64) -> MatchResult {
        match self.best(Scorer::Naive) {
            None => MatchResult::no_match(),
            Some((b, runner_up)) => result(&b.candidate, b.naive, runner_up, b.naive > threshold),
        }
    }
}

fn result(c: &SequenceCandidate, score: f64, runner_up: f64, accepted: bool) -> MatchResult {
    MatchResult {
        song_id: Some(c.song_id),
        title: None,
        offset_s: c.start_offset_s as f64,
        score,
        accepted,
        runner_up_score: runner_up,
    }
}

/// Picks the best-scoring candidate and accepts it iff its score exceeds
/// `theta_abs` and, when another song was scored, beats that song's best by
/// more than `theta_gap`.
pub fn adaptive_accept(scored: &[(SequenceCandidate, f64)], theta_abs: f64, theta_gap: f64) -> MatchResult {
    let Some(&(best, score)) = scored.iter().max_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then(a.0.support.cmp(&b.0.support))
            .then(b.0.song_id.cmp(&a.0.song_id))
            .then(b.0.start_offset_s.cmp(&a.0.start_offset_s))
    }) else {
        return MatchResult::no_match();
    };
    let rival = scored
        .iter()
        .filter(|(c, _)| c.song_id != best.song_id)
        .map(|&(_, s)| s)
        .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))));
    let accepted = score > theta_abs && rival.is_none_or(|r| score - r > theta_gap);
    result(&best, score, rival.unwrap_or(0.0), accepted)
}

/// Searches every query fingerprint, collects candidates and scores them
/// with both scorers.
pub fn analyze(
    query: &[Fingerprint],
    index: &IvfPqIndex,
    density: &DensityModel,
    cfg: &MatcherConfig,
) -> Result<QueryAnalysis, MatchError> {
    if query.is_empty() {
        return Err(MatchError::EmptyQuery);
    }
    if density.radii.len() != index.len() {
        return Err(MatchError::DensityMismatch {
            expected: index.len(),
            found: density.radii.len(),
        });
    }
    let mut hits = Vec::with_capacity(query.len());
    let mut scanned = 0.0;
    for q in query {
        let r = index.search_topk(&q.values, cfg.top_k, cfg.probe)?;
        scanned += r.scanned_fraction;
        hits.push(r.hits);
    }
    let has_hits: Vec<bool> = hits.iter().map(|h| !h.is_empty()).collect();
    let mut scored = Vec::new();
    for c in collect_candidates(&hits, cfg.max_candidates) {
        let sims = step_similarities(query, &c, index, density)?;
        let naive: Vec<Option<f64>> = aligned_distances(query, &c, index)?
            .into_iter()
            .map(|o| o.map(|(dist, _)| (1.0 - dist / 2.0).clamp(0.0, 1.0)))
            .collect();
        scored.push(ScoredCandidate {
            candidate: c,
            adaptive: mean_aligned(&sims, Some(&has_hits)),
            naive: mean_aligned(&naive, Some(&has_hits)),
        });
    }
    Ok(QueryAnalysis {
        scored,
        scanned_fraction: scanned / query.len() as f64,
    })
}

/// Full second stage with the adaptive rule.
pub fn recognize(
    query: &[Fingerprint],
    index: &IvfPqIndex,
    density: &DensityModel,
    cfg: &MatcherConfig,
) -> Result<MatchResult, MatchError> {
    Ok(analyze(query, index, density, cfg)?.decide_adaptive(cfg.theta_abs, cfg.theta_gap))
}
