//! Analytic gradients versus central finite differences on tiny networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tunewake::nnfp::{SegmentLabel, Triplet, TripletBatch};
use tunewake::{DetectorTopology, DetectorWeights, EmbedderTopology, EmbedderWeights, LogMelFrame};

const STEP: f64 = 1e-6;
const TOLERANCE: f64 = 1e-3;

fn random_frames(rng: &mut ChaCha8Rng, n: usize) -> Vec<LogMelFrame> {
    (0..n)
        .map(|i| {
            let mut coeffs = [0f32; 32];
            coeffs.iter_mut().for_each(|c| *c = rng.random_range(-3.0..3.0));
            LogMelFrame {
                coeffs,
                frame_index: i as u64,
            }
        })
        .collect()
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks every entry of every trainable tensor. `loss` re-evaluates the
/// scalar objective for a perturbed copy of the weights.
fn check_all<W: Clone>(
    base: &W,
    analytic: Vec<Vec<f64>>,
    params_mut: impl Fn(&mut W) -> Vec<&mut [f64]>,
    loss: impl Fn(&W) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let mut plus = base.clone();
            params_mut(&mut plus)[t][i] += STEP;
            let mut minus = base.clone();
            params_mut(&mut minus)[t][i] -= STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
            let err = relative_error(grad[i], numeric);
            assert!(
                err <= TOLERANCE,
                "tensor {t} entry {i}: analytic {} numeric {numeric} rel {err}",
                grad[i]
            );
            worst = worst.max(err);
        }
    }
    worst
}

fn tiny_detector(rng: &mut ChaCha8Rng) -> DetectorWeights {
    let topo = DetectorTopology {
        channels: 4,
        conv_layers: 2,
        final_len: 3,
        hidden: 3,
    };
    let mut w = DetectorWeights::random(topo, rng);
    let windows: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..w.topology.window() * 4).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    w.calibrate_batch_norm(&windows);
    // Move batch-norm scale/shift away from identity.
    for p in w.trainable_mut() {
        for v in p.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    w
}

#[test]
fn detector_cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = tiny_detector(&mut rng);
    let window = random_frames(&mut rng, w.topology.window());
    for is_music in [true, false] {
        let (_, grads) = w.loss_and_gradient(&window, is_music).unwrap();
        let analytic: Vec<Vec<f64>> = grads.trainable().iter().map(|t| t.to_vec()).collect();
        let worst = check_all(
            &w,
            analytic,
            |w| w.trainable_mut(),
            |w| w.loss_and_gradient(&window, is_music).unwrap().0,
        );
        assert!(worst <= TOLERANCE);
    }
}

fn tiny_embedder(rng: &mut ChaCha8Rng) -> (EmbedderWeights, Vec<Vec<LogMelFrame>>) {
    let topo = EmbedderTopology {
        input_frames: 16,
        mel_bins: 8,
        conv_channels: vec![2, 4],
        branches: 2,
        branch_hidden: 3,
        dim: 8,
    };
    let mut w = EmbedderWeights::random(topo, rng).unwrap();
    let windows: Vec<Vec<LogMelFrame>> = (0..6).map(|_| random_frames(rng, 16)).collect();
    let refs: Vec<&[LogMelFrame]> = windows.iter().map(Vec::as_slice).collect();
    w.calibrate_batch_norm(&refs).unwrap();
    for p in w.trainable_mut() {
        for v in p.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    (w, windows)
}

#[test]
fn embedder_triplet_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (w, windows) = tiny_embedder(&mut rng);
    let refs: Vec<&[LogMelFrame]> = windows.iter().map(Vec::as_slice).collect();
    // A margin above the largest possible squared distance between unit
    // vectors keeps every triplet active, so the loss is smooth.
    let batch = TripletBatch {
        triplets: vec![
            Triplet { anchor: 0, positive: 1, negative: 2 },
            Triplet { anchor: 1, positive: 0, negative: 3 },
            Triplet { anchor: 4, positive: 5, negative: 0 },
            Triplet { anchor: 5, positive: 4, negative: 2 },
        ],
        margin: 5.0,
    };
    let (_, grads) = w.triplet_loss_and_gradient(&refs, &batch).unwrap();
    let analytic: Vec<Vec<f64>> = grads.trainable().iter().map(|t| t.to_vec()).collect();
    check_all(
        &w,
        analytic,
        |w| w.trainable_mut(),
        |w| w.triplet_loss_and_gradient(&refs, &batch).unwrap().0,
    );
}

#[test]
fn embedder_mined_batch_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (w, windows) = tiny_embedder(&mut rng);
    let refs: Vec<&[LogMelFrame]> = windows.iter().map(Vec::as_slice).collect();
    let labels: Vec<SegmentLabel> = [(1, 0), (1, 100), (2, 0), (2, 150), (3, 0), (3, 50)]
        .iter()
        .map(|&(song_id, offset_ms)| SegmentLabel { song_id, offset_ms })
        .collect();
    let emb = w.embed_batch(&refs).unwrap();
    let emb: Vec<Vec<f64>> = emb.chunks(8).map(<[f64]>::to_vec).collect();
    let mut batch = tunewake::nnfp::mine_triplets(&emb, &labels, 300, 0.4).unwrap();
    batch.margin = 5.0;
    let (_, grads) = w.triplet_loss_and_gradient(&refs, &batch).unwrap();
    let analytic: Vec<Vec<f64>> = grads.trainable().iter().map(|t| t.to_vec()).collect();
    check_all(
        &w,
        analytic,
        |w| w.trainable_mut(),
        |w| w.triplet_loss_and_gradient(&refs, &batch).unwrap().0,
    );
}
