use super::EmbedderError;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `max(0, |a - p|^2 - |a - n|^2 + margin)`.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    (sq_dist(a, p) - sq_dist(a, n) + margin).max(0.0)
}

/// Which song segment an embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLabel {
    pub song_id: u32,
    pub offset_ms: i64,
}

impl SegmentLabel {
    /// Same song and start positions closer than the tolerance.
    pub fn same_segment(&self, other: &SegmentLabel, tolerance_ms: i64) -> bool {
        self.song_id == other.song_id && (self.offset_ms - other.offset_ms).abs() < tolerance_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
    pub margin: f64,
}

impl TripletBatch {
    /// Mean loss and its gradient w.r.t. each embedding.
    pub fn loss_and_gradient(&self, embeddings: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let mut grads: Vec<Vec<f64>> = embeddings.iter().map(|e| vec![0.0; e.len()]).collect();
        if self.triplets.is_empty() {
            return (0.0, grads);
        }
        let scale = 1.0 / self.triplets.len() as f64;
        let mut total = 0.0;
        for t in &self.triplets {
            let (a, p, n) = (
                &embeddings[t.anchor],
                &embeddings[t.positive],
                &embeddings[t.negative],
            );
            let l = triplet_loss(a, p, n, self.margin);
            if l <= 0.0 {
                continue;
            }
            total += l;
            for i in 0..a.len() {
                grads[t.anchor][i] += scale * 2.0 * (n[i] - p[i]);
                grads[t.positive][i] += scale * 2.0 * (p[i] - a[i]);
                grads[t.negative][i] += scale * 2.0 * (a[i] - n[i]);
            }
        }
        (total * scale, grads)
    }
}

/// For every ordered same-segment pair picks a semi-hard negative (farther
/// than the positive but inside the margin, closest first), falling back to
/// the hardest negative when none is semi-hard.
pub fn mine_triplets(
    embeddings: &[Vec<f64>],
    labels: &[SegmentLabel],
    pos_tolerance_ms: i64,
    margin: f64,
) -> Result<TripletBatch, EmbedderError> {
    assert_eq!(embeddings.len(), labels.len());
    let n = embeddings.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(&embeddings[i], &embeddings[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut triplets = Vec::new();
    let mut any_positive = false;
    for a in 0..n {
        for p in 0..n {
            if a == p || !labels[a].same_segment(&labels[p], pos_tolerance_ms) {
                continue;
            }
            any_positive = true;
            let d_ap = dist[a * n + p];
            let mut semi_hard: Option<(f64, usize)> = None;
            let mut hardest: Option<(f64, usize)> = None;
            for k in 0..n {
                if labels[a].same_segment(&labels[k], pos_tolerance_ms) {
                    continue;
                }
                let d_an = dist[a * n + k];
                if hardest.is_none_or(|(d, _)| d_an < d) {
                    hardest = Some((d_an, k));
                }
                if d_an > d_ap && d_an < d_ap + margin && semi_hard.is_none_or(|(d, _)| d_an < d) {
                    semi_hard = Some((d_an, k));
                }
            }
            let (_, negative) = semi_hard.or(hardest).ok_or(EmbedderError::NoNegative)?;
            triplets.push(Triplet {
                anchor: a,
                positive: p,
                negative,
            });
        }
    }
    if !any_positive {
        return Err(EmbedderError::NoPositivePair);
    }
    Ok(TripletBatch { triplets, margin })
}
