//! IVF-PQ fingerprint index.
//!
//! A k-means partitioner groups DB fingerprints into `P` cells; the residual
//! of each fingerprint from its cell centroid is product-quantized into `M`
//! one-byte codes. A query probes the cells nearest to it until they cover
//! a target fraction of the DB, and ranks the points in those cells with
//! asymmetric (float query vs. code) distances from per-cell lookup tables.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kmeans::{kmeans, KMeansError};
use crate::synth::rng_for;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("need at least {needed} vectors, got {found}")]
    InsufficientData { found: usize, needed: usize },
    #[error("dimension {dim} is not divisible into {subspaces} subspaces")]
    IndivisibleDim { dim: usize, subspaces: usize },
    #[error("vector has dimension {found}, index expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("code byte {code} in subspace {subspace} exceeds codebook size {ksub}")]
    CodeOutOfRange { subspace: usize, code: u8, ksub: usize },
    #[error("partition {partition} out of range (P = {partitions})")]
    PartitionOutOfRange { partition: usize, partitions: usize },
    #[error("index is empty")]
    Empty,
    #[error("invalid index parameter: {0}")]
    InvalidParameter(String),
}

impl From<KMeansError> for IndexError {
    fn from(e: KMeansError) -> Self {
        match e {
            KMeansError::TooFewPoints { points, k } => IndexError::InsufficientData {
                found: points,
                needed: k,
            },
            KMeansError::Degenerate => IndexError::InvalidParameter(e.to_string()),
        }
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

fn nearest_row(rows: &[f32], dim: usize, x: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (i, r) in rows.chunks_exact(dim).enumerate() {
        let d = sq_dist(r, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Draws at most `cap` rows (all of them when there are fewer), in index
/// order, as f64 for training.
fn training_sample(data: &[f32], dim: usize, cap: usize, seed: u64) -> Vec<f64> {
    let n = data.len() / dim;
    let rows: Vec<usize> = if n <= cap {
        (0..n).collect()
    } else {
        let mut idx = sample(&mut rng_for(seed, 0x5A), n, cap).into_vec();
        idx.sort_unstable();
        idx
    };
    rows.iter()
        .flat_map(|&r| data[r * dim..(r + 1) * dim].iter().map(|&v| v as f64))
        .collect()
}

/// Coarse quantizer: `P` centroids of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionerModel {
    pub dim: usize,
    /// `P x dim`.
    pub centroids: Vec<f32>,
}

impl PartitionerModel {
    /// k-means++ then `iterations` Lloyd steps on (a sample of) `data`.
    pub fn train(
        data: &[f32],
        dim: usize,
        partitions: usize,
        iterations: usize,
        max_training_points: usize,
        seed: u64,
    ) -> Result<(Self, Vec<f64>), IndexError> {
        let n = data.len() / dim.max(1);
        if n < partitions {
            return Err(IndexError::InsufficientData {
                found: n,
                needed: partitions,
            });
        }
        let train = training_sample(data, dim, max_training_points.max(partitions), seed);
        let km = kmeans(&train, dim, partitions, iterations, &mut rng_for(seed, 0xC0))?;
        Ok((
            Self {
                dim,
                centroids: km.centroids.iter().map(|&v| v as f32).collect(),
            },
            km.objective,
        ))
    }

    pub fn partitions(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, p: usize) -> &[f32] {
        &self.centroids[p * self.dim..(p + 1) * self.dim]
    }

    pub fn assign(&self, x: &[f32]) -> usize {
        nearest_row(&self.centroids, self.dim, x).0
    }

    /// Partitions ordered by distance to `q` (ties by partition id).
    pub fn ranked(&self, q: &[f32]) -> Vec<(usize, f32)> {
        let mut r: Vec<(usize, f32)> = self
            .centroids
            .chunks_exact(self.dim)
            .map(|c| sq_dist(c, q))
            .enumerate()
            .collect();
        r.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        r
    }
}

/// Product quantizer: `M` subspaces of width `d / M`, `ksub <= 256` centroids each.
#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    pub dim: usize,
    pub subspaces: usize,
    pub ksub: usize,
    /// `M x ksub x (d / M)`.
    pub centroids: Vec<f32>,
}

impl PqCodebook {
    pub fn sub_dim(&self) -> usize {
        self.dim / self.subspaces
    }

    pub fn code_bytes(&self) -> usize {
        self.subspaces
    }

    fn sub_centroid(&self, m: usize, j: usize) -> &[f32] {
        let ds = self.sub_dim();
        &self.centroids[(m * self.ksub + j) * ds..][..ds]
    }

    /// Independent k-means per subspace. Returns the codebook and the mean
    /// reconstruction error `|x - x~|` over the training rows.
    pub fn train(
        data: &[f32],
        dim: usize,
        subspaces: usize,
        ksub: usize,
        iterations: usize,
        max_training_points: usize,
        seed: u64,
    ) -> Result<(Self, f64), IndexError> {
        if subspaces == 0 || dim % subspaces != 0 {
            return Err(IndexError::IndivisibleDim { dim, subspaces });
        }
        if ksub == 0 || ksub > 256 {
            return Err(IndexError::InvalidParameter(format!("ksub {ksub} not in 1..=256")));
        }
        let n = data.len() / dim;
        if n < ksub {
            return Err(IndexError::InsufficientData {
                found: n,
                needed: ksub,
            });
        }
        let train = training_sample(data, dim, max_training_points.max(ksub), seed);
        let rows = train.len() / dim;
        let ds = dim / subspaces;
        let mut centroids = Vec::with_capacity(subspaces * ksub * ds);
        for m in 0..subspaces {
            let slice: Vec<f64> = (0..rows)
                .flat_map(|r| train[r * dim + m * ds..][..ds].iter().copied())
                .collect();
            let km = kmeans(&slice, ds, ksub, iterations, &mut rng_for(seed, 0x100 + m as u64))?;
            centroids.extend(km.centroids.iter().map(|&v| v as f32));
        }
        let cb = Self {
            dim,
            subspaces,
            ksub,
            centroids,
        };
        let err = cb.mean_error(&train.iter().map(|&v| v as f32).collect::<Vec<_>>());
        Ok((cb, err))
    }

    pub fn encode(&self, x: &[f32]) -> Vec<u8> {
        let ds = self.sub_dim();
        (0..self.subspaces)
            .map(|m| {
                let block = &self.centroids[m * self.ksub * ds..(m + 1) * self.ksub * ds];
                nearest_row(block, ds, &x[m * ds..(m + 1) * ds]).0 as u8
            })
            .collect()
    }

    pub fn decode(&self, code: &[u8]) -> Result<Vec<f32>, IndexError> {
        let mut out = Vec::with_capacity(self.dim);
        for (m, &c) in code.iter().enumerate() {
            if c as usize >= self.ksub {
                return Err(IndexError::CodeOutOfRange {
                    subspace: m,
                    code: c,
                    ksub: self.ksub,
                });
            }
            out.extend_from_slice(self.sub_centroid(m, c as usize));
        }
        Ok(out)
    }

    /// Mean `|x - decode(encode(x))|` over the rows of `data`.
    pub fn mean_error(&self, data: &[f32]) -> f64 {
        let n = data.len() / self.dim;
        if n == 0 {
            return 0.0;
        }
        let total: f64 = data
            .chunks_exact(self.dim)
            .map(|x| {
                let rec = self.decode(&self.encode(x)).expect("own codes are in range");
                (sq_dist(x, &rec) as f64).sqrt()
            })
            .sum();
        total / n as f64
    }

    /// `table[m * ksub + j] = |r_m - c_{m,j}|^2` for a residual `r`.
    pub fn distance_table(&self, r: &[f32]) -> Vec<f32> {
        let ds = self.sub_dim();
        let mut t = Vec::with_capacity(self.subspaces * self.ksub);
        for m in 0..self.subspaces {
            let rm = &r[m * ds..(m + 1) * ds];
            for j in 0..self.ksub {
                t.push(sq_dist(rm, self.sub_centroid(m, j)));
            }
        }
        t
    }
}

/// A stored fingerprint: cell id plus residual code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedFingerprint {
    pub partition: u32,
    pub code: Vec<u8>,
    pub song_id: u32,
    /// Whole seconds from the start of the song.
    pub offset_s: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub song_id: u32,
    pub offset_s: u32,
    /// Estimated `|q - x~|`.
    pub approx_distance: f32,
    /// Position of the fingerprint in the DB's global order.
    pub db_index: u32,
}

fn hit_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    a.approx_distance
        .total_cmp(&b.approx_distance)
        .then(a.song_id.cmp(&b.song_id))
        .then(a.offset_s.cmp(&b.offset_s))
}

/// How many partitions a query scans.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePolicy {
    /// Fewest nearest partitions whose points cover at least this fraction
    /// of the DB (at least one partition).
    Coverage(f64),
    /// A fixed number of nearest partitions.
    Count(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<SearchHit>,
    pub probed_partitions: usize,
    pub scanned_points: usize,
    /// `scanned_points / total points`.
    pub scanned_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    /// `None` selects `ceil(sqrt(N))`.
    pub partitions: Option<usize>,
    /// `None` selects `d / 8` (one code byte per 8 floats).
    pub subspaces: Option<usize>,
    pub kmeans_iterations: usize,
    pub max_training_points: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            partitions: None,
            subspaces: None,
            kmeans_iterations: 20,
            max_training_points: 32_768,
            seed: 0,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<(), IndexError> {
        let bad = |m: &str| Err(IndexError::InvalidParameter(m.into()));
        if self.partitions == Some(0) || self.subspaces == Some(0) {
            return bad("partitions and subspaces must be positive");
        }
        if self.kmeans_iterations == 0 || self.max_training_points == 0 {
            return bad("k-means iterations and sample size must be positive");
        }
        Ok(())
    }

    pub fn partitions_for(&self, n: usize) -> usize {
        self.partitions
            .unwrap_or_else(|| (n as f64).sqrt().ceil() as usize)
            .clamp(1, n.max(1))
    }
}

/// Immutable IVF-PQ index over `N` fingerprints in DB order.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfPqIndex {
    pub partitioner: PartitionerModel,
    pub codebook: PqCodebook,
    pub song_ids: Vec<u32>,
    pub offsets: Vec<u32>,
    pub partition_of: Vec<u32>,
    /// `N x M` code bytes.
    pub codes: Vec<u8>,
    postings: Vec<Vec<u32>>,
    /// `song_id -> (first index, count)`.
    spans: BTreeMap<u32, (u32, u32)>,
}

impl IvfPqIndex {
    /// Trains the partitioner and residual PQ on `vectors` (`N x d`, DB
    /// order) and encodes every vector. `ids[i] = (song_id, offset_s)`.
    pub fn build(
        vectors: &[f32],
        dim: usize,
        ids: &[(u32, u32)],
        cfg: &IndexConfig,
    ) -> Result<Self, IndexError> {
        cfg.validate()?;
        let n = ids.len();
        if n == 0 {
            return Err(IndexError::Empty);
        }
        if vectors.len() != n * dim {
            return Err(IndexError::DimMismatch {
                expected: dim,
                found: vectors.len() / n,
            });
        }
        let subspaces = cfg.subspaces.unwrap_or(dim / 8).max(1);
        if dim % subspaces != 0 {
            return Err(IndexError::IndivisibleDim { dim, subspaces });
        }
        let p = cfg.partitions_for(n);
        let (partitioner, _) = PartitionerModel::train(
            vectors,
            dim,
            p,
            cfg.kmeans_iterations,
            cfg.max_training_points,
            cfg.seed,
        )?;
        let partition_of: Vec<u32> = vectors
            .chunks_exact(dim)
            .map(|x| partitioner.assign(x) as u32)
            .collect();
        let residuals = residuals(vectors, dim, &partitioner, &partition_of);
        let ksub = n.min(256);
        let (codebook, _) = PqCodebook::train(
            &residuals,
            dim,
            subspaces,
            ksub,
            cfg.kmeans_iterations,
            cfg.max_training_points,
            cfg.seed ^ 0x9E37,
        )?;
        let codes = residuals.chunks_exact(dim).flat_map(|r| codebook.encode(r)).collect();
        Self::from_parts(
            partitioner,
            codebook,
            ids.iter().map(|i| i.0).collect(),
            ids.iter().map(|i| i.1).collect(),
            partition_of,
            codes,
        )
    }

    /// Assembles an index from stored parts, validating ranges and
    /// rebuilding the postings lists.
    pub fn from_parts(
        partitioner: PartitionerModel,
        codebook: PqCodebook,
        song_ids: Vec<u32>,
        offsets: Vec<u32>,
        partition_of: Vec<u32>,
        codes: Vec<u8>,
    ) -> Result<Self, IndexError> {
        let n = song_ids.len();
        let p = partitioner.partitions();
        if partitioner.dim != codebook.dim {
            return Err(IndexError::DimMismatch {
                expected: partitioner.dim,
                found: codebook.dim,
            });
        }
        if offsets.len() != n || partition_of.len() != n || codes.len() != n * codebook.subspaces {
            return Err(IndexError::InvalidParameter("column lengths disagree".into()));
        }
        let mut postings = vec![Vec::new(); p];
        for (i, &part) in partition_of.iter().enumerate() {
            let slot = postings.get_mut(part as usize).ok_or(IndexError::PartitionOutOfRange {
                partition: part as usize,
                partitions: p,
            })?;
            slot.push(i as u32);
        }
        for code in codes.chunks_exact(codebook.subspaces.max(1)) {
            if let Some((m, &c)) = code.iter().enumerate().find(|(_, &c)| c as usize >= codebook.ksub) {
                return Err(IndexError::CodeOutOfRange {
                    subspace: m,
                    code: c,
                    ksub: codebook.ksub,
                });
            }
        }
        let spans = song_spans(&song_ids, &offsets)?;
        Ok(Self {
            partitioner,
            codebook,
            song_ids,
            offsets,
            partition_of,
            codes,
            postings,
            spans,
        })
    }

    pub fn len(&self) -> usize {
        self.song_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.song_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.codebook.dim
    }

    /// `(first index, count)` of a song's fingerprints.
    pub fn song_span(&self, song_id: u32) -> Option<(usize, usize)> {
        self.spans.get(&song_id).map(|&(s, c)| (s as usize, c as usize))
    }

    pub fn song_count(&self) -> usize {
        self.spans.len()
    }

    /// Global index of the fingerprint at `offset_s` in `song_id`.
    pub fn locate(&self, song_id: u32, offset_s: i64) -> Option<usize> {
        let (start, count) = self.song_span(song_id)?;
        (offset_s >= 0 && (offset_s as usize) < count).then(|| start + offset_s as usize)
    }

    pub fn postings(&self, partition: usize) -> &[u32] {
        &self.postings[partition]
    }

    pub fn code(&self, i: usize) -> &[u8] {
        let m = self.codebook.subspaces;
        &self.codes[i * m..(i + 1) * m]
    }

    pub fn quantized(&self, i: usize) -> QuantizedFingerprint {
        QuantizedFingerprint {
            partition: self.partition_of[i],
            code: self.code(i).to_vec(),
            song_id: self.song_ids[i],
            offset_s: self.offsets[i],
        }
    }

    /// Reconstruction `x~ = centroid + decoded residual`.
    pub fn decode(&self, i: usize) -> Vec<f32> {
        let c = self.partitioner.centroid(self.partition_of[i] as usize);
        let r = self.codebook.decode(self.code(i)).expect("codes validated at construction");
        c.iter().zip(&r).map(|(a, b)| a + b).collect()
    }

    /// Quantizes a vector the way the index stores it.
    pub fn encode(&self, x: &[f32]) -> (u32, Vec<u8>) {
        let p = self.partitioner.assign(x);
        let c = self.partitioner.centroid(p);
        let r: Vec<f32> = x.iter().zip(c).map(|(a, b)| a - b).collect();
        (p as u32, self.codebook.encode(&r))
    }

    fn adc_table(&self, q: &[f32], partition: usize) -> Vec<f32> {
        let c = self.partitioner.centroid(partition);
        let r: Vec<f32> = q.iter().zip(c).map(|(a, b)| a - b).collect();
        self.codebook.distance_table(&r)
    }

    fn adc_distance(&self, table: &[f32], i: usize) -> f32 {
        let ksub = self.codebook.ksub;
        let mut s = 0.0f32;
        for (m, &c) in self.code(i).iter().enumerate() {
            s += table[m * ksub + c as usize];
        }
        s.max(0.0).sqrt()
    }

    fn hit(&self, i: usize, d: f32) -> SearchHit {
        SearchHit {
            song_id: self.song_ids[i],
            offset_s: self.offsets[i],
            approx_distance: d,
            db_index: i as u32,
        }
    }

    /// Asymmetric distance from `q` to stored point `i`.
    pub fn approx_distance(&self, q: &[f32], i: usize) -> f32 {
        let table = self.adc_table(q, self.partition_of[i] as usize);
        self.adc_distance(&table, i)
    }

    fn probe_count(&self, ranked: &[(usize, f32)], policy: ProbePolicy) -> usize {
        match policy {
            ProbePolicy::Count(c) => c.clamp(1, ranked.len()),
            ProbePolicy::Coverage(f) => {
                let need = (f * self.len() as f64).ceil() as usize;
                let mut covered = 0;
                for (i, &(p, _)) in ranked.iter().enumerate() {
                    covered += self.postings[p].len();
                    if covered >= need {
                        return i + 1;
                    }
                }
                ranked.len()
            }
        }
    }

    /// Top-`k` hits among the partitions selected by `policy`, ascending by
    /// (distance, song_id, offset).
    pub fn search_topk(&self, q: &[f32], k: usize, policy: ProbePolicy) -> Result<SearchResult, IndexError> {
        if self.is_empty() {
            return Err(IndexError::Empty);
        }
        if q.len() != self.dim() {
            return Err(IndexError::DimMismatch {
                expected: self.dim(),
                found: q.len(),
            });
        }
        let ranked = self.partitioner.ranked(q);
        let probes = self.probe_count(&ranked, policy);
        let mut hits = Vec::new();
        for &(p, _) in &ranked[..probes] {
            if self.postings[p].is_empty() {
                continue;
            }
            let table = self.adc_table(q, p);
            for &i in &self.postings[p] {
                hits.push(self.hit(i as usize, self.adc_distance(&table, i as usize)));
            }
        }
        let scanned_points = hits.len();
        select_top(&mut hits, k);
        Ok(SearchResult {
            hits,
            probed_partitions: probes,
            scanned_points,
            scanned_fraction: scanned_points as f64 / self.len() as f64,
        })
    }

    /// Reference scan of every stored point with the same asymmetric
    /// distances, in DB order.
    pub fn exhaustive_topk(&self, q: &[f32], k: usize) -> Vec<SearchHit> {
        let tables: Vec<Vec<f32>> = (0..self.partitioner.partitions())
            .map(|p| self.adc_table(q, p))
            .collect();
        let mut hits: Vec<SearchHit> = (0..self.len())
            .map(|i| self.hit(i, self.adc_distance(&tables[self.partition_of[i] as usize], i)))
            .collect();
        select_top(&mut hits, k);
        hits
    }
}

/// Songs must occupy contiguous runs with offsets `0, 1, 2, ...`.
fn song_spans(song_ids: &[u32], offsets: &[u32]) -> Result<BTreeMap<u32, (u32, u32)>, IndexError> {
    let mut spans = BTreeMap::new();
    let mut i = 0;
    while i < song_ids.len() {
        let song = song_ids[i];
        let start = i;
        while i < song_ids.len() && song_ids[i] == song {
            if offsets[i] as usize != i - start {
                return Err(IndexError::InvalidParameter(format!(
                    "song {song}: fingerprint offsets must run 0, 1, 2, ..."
                )));
            }
            i += 1;
        }
        if spans.insert(song, (start as u32, (i - start) as u32)).is_some() {
            return Err(IndexError::InvalidParameter(format!(
                "song {song} is not stored contiguously"
            )));
        }
    }
    Ok(spans)
}

fn select_top(hits: &mut Vec<SearchHit>, k: usize) {
    if hits.len() > k && k > 0 {
        hits.select_nth_unstable_by(k - 1, hit_order);
        hits.truncate(k);
    }
    hits.sort_by(hit_order);
}

fn residuals(vectors: &[f32], dim: usize, part: &PartitionerModel, assign: &[u32]) -> Vec<f32> {
    vectors
        .chunks_exact(dim)
        .zip(assign)
        .flat_map(|(x, &p)| {
            let c = part.centroid(p as usize);
            x.iter().zip(c).map(|(a, b)| a - b).collect::<Vec<_>>()
        })
        .collect()
}
