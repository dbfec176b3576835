//! Lloyd's k-means with k-means++ seeding, shared by the partitioner and the
//! product quantizer.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KMeansError {
    #[error("k-means needs at least {k} points, got {points}")]
    TooFewPoints { points: usize, k: usize },
    #[error("k and dimension must be positive")]
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lowest
/// index.
pub fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(data: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // Every point coincides with a centroid: take the first unused one.
            chosen.iter().position(|c| !c).unwrap_or(0)
        };
        chosen[next] = true;
        let c = point(next).to_vec();
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(point(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Runs `iterations` Lloyd steps (stopping early once assignments settle).
/// Clusters that lose all their points keep their previous centroid.
pub fn kmeans(
    data: &[f64],
    dim: usize,
    k: usize,
    iterations: usize,
    rng: &mut impl Rng,
) -> Result<KMeans, KMeansError> {
    if k == 0 || dim == 0 {
        return Err(KMeansError::Degenerate);
    }
    let n = data.len() / dim;
    if n < k {
        return Err(KMeansError::TooFewPoints { points: n, k });
    }
    let mut centroids = plus_plus_init(data, dim, k, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut objective = Vec::new();
    for _ in 0..iterations.max(1) {
        let mut changed = false;
        let mut total = 0.0;
        for (i, x) in data.chunks_exact(dim).enumerate() {
            let (c, d) = nearest(&centroids, dim, x);
            total += d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        objective.push(total);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (x, &c) in data.chunks_exact(dim).zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(KMeans {
        dim,
        centroids,
        assignments,
        objective,
    })
}
