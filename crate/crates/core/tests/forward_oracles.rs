//! Both networks against straightforward reference forward passes written
//! from the layer definitions: direct loops, textbook batch norm, no im2col,
//! no folded affine maps, no streaming state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tunewake::nn::{BatchNorm, BN_EPS};
use tunewake::{DetectorTopology, DetectorWeights, EmbedderTopology, EmbedderWeights, LogMelFrame};

fn frames(rng: &mut ChaCha8Rng, n: usize) -> Vec<LogMelFrame> {
    (0..n)
        .map(|i| {
            let mut coeffs = [0f32; 32];
            coeffs.iter_mut().for_each(|c| *c = rng.random_range(-12.0..2.0));
            LogMelFrame {
                coeffs,
                frame_index: i as u64,
            }
        })
        .collect()
}

fn perturb(bn: &mut Option<BatchNorm>, rng: &mut ChaCha8Rng) {
    if let Some(b) = bn {
        for i in 0..b.gamma.len() {
            b.gamma[i] = rng.random_range(0.5..1.5);
            b.beta[i] = rng.random_range(-0.3..0.3);
            b.mean[i] = rng.random_range(-0.5..0.5);
            b.var[i] = rng.random_range(0.2..2.0);
        }
    }
}

fn batch_norm(bn: &Option<BatchNorm>, c: usize, z: f64) -> f64 {
    match bn {
        Some(b) => b.gamma[c] * (z - b.mean[c]) / (b.var[c] + BN_EPS).sqrt() + b.beta[c],
        None => z,
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn detector_reference(w: &DetectorWeights, window: &[LogMelFrame]) -> f64 {
    let c = w.topology.channels;
    // x[t][ch]
    let mut x: Vec<Vec<f64>> = window.iter().map(|f| f.coeffs[..c].iter().map(|&v| v as f64).collect()).collect();
    for layer in &w.convs {
        let len_out = (x.len() - 4) / 2 + 1;
        let mut y = vec![vec![0.0; c]; len_out];
        for (t, out) in y.iter_mut().enumerate() {
            let depth: Vec<f64> = (0..c)
                .map(|ch| (0..4).map(|k| layer.depthwise[ch * 4 + k] * x[2 * t + k][ch]).sum())
                .collect();
            for (o, v) in out.iter_mut().enumerate() {
                let z = (0..c).map(|i| layer.pointwise[o * c + i] * depth[i]).sum::<f64>() + layer.bias[o];
                *v = batch_norm(&layer.bn, o, z).max(0.0);
            }
        }
        x = y;
    }
    let flat: Vec<f64> = x.concat();
    let hidden: Vec<f64> = (0..w.hidden.bias.len())
        .map(|o| {
            let z = (0..flat.len()).map(|i| w.hidden.weight[o * flat.len() + i] * flat[i]).sum::<f64>()
                + w.hidden.bias[o];
            batch_norm(&w.hidden.bn, o, z).max(0.0)
        })
        .collect();
    let logit = (0..hidden.len()).map(|i| w.output.weight[i] * hidden[i]).sum::<f64>() + w.output.bias[0];
    1.0 / (1.0 + (-logit).exp())
}

fn seeded_detector() -> (DetectorWeights, Vec<LogMelFrame>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut w = DetectorWeights::random(DetectorTopology::default(), &mut rng);
    for l in &mut w.convs {
        perturb(&mut l.bn, &mut rng);
        l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    perturb(&mut w.hidden.bn, &mut rng);
    // Keep the logit small so the sigmoid is not saturated and the
    // comparisons below see every upstream difference.
    w.output.weight.iter_mut().for_each(|v| *v *= 0.02);
    w.output.bias[0] = 0.0;
    let window = frames(&mut rng, w.topology.window());
    (w, window)
}

/// Recorded from `detector_reference` on `seeded_detector()`.
const DETECTOR_GOLDEN: f64 = 0.58969741827804001;

#[test]
fn detector_matches_the_direct_convolution_reference() {
    let (w, window) = seeded_detector();
    let reference = detector_reference(&w, &window);
    let p = w.forward(&window).unwrap();
    assert!((p - reference).abs() <= 1e-12, "forward {p} reference {reference}");
    assert!((reference - DETECTOR_GOLDEN).abs() <= 1e-12, "reference {reference:.17}");
    // The folded-affine inference path computes the same function.
    assert!((w.fold_batch_norm().forward(&window).unwrap() - reference).abs() <= 1e-9);
}

/// `x[c][h][w]` -> 3x3, stride 2, zero padding 1.
fn conv3x3(x: &[Vec<Vec<f64>>], weight: &[f64], bias: &[f64], bn: &Option<BatchNorm>) -> Vec<Vec<Vec<f64>>> {
    let (cin, h, w) = (x.len(), x[0].len(), x[0][0].len());
    let (ho, wo) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    (0..bias.len())
        .map(|o| {
            (0..ho)
                .map(|i| {
                    (0..wo)
                        .map(|j| {
                            let mut z = bias[o];
                            for ci in 0..cin {
                                for ki in 0..3 {
                                    for kj in 0..3 {
                                        let (r, c) = ((2 * i + ki) as isize - 1, (2 * j + kj) as isize - 1);
                                        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                                            z += weight[o * cin * 9 + ci * 9 + ki * 3 + kj] * x[ci][r as usize][c as usize];
                                        }
                                    }
                                }
                            }
                            elu(batch_norm(bn, o, z))
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn embedder_reference(w: &EmbedderWeights, window: &[LogMelFrame]) -> Vec<f64> {
    let t = &w.topology;
    let mut plane: Vec<Vec<f64>> = window
        .iter()
        .map(|f| f.coeffs[..t.mel_bins].iter().map(|&v| v as f64).collect())
        .collect();
    let mean = plane.iter().flatten().sum::<f64>() / (t.input_frames * t.mel_bins) as f64;
    plane.iter_mut().flatten().for_each(|v| *v -= mean);
    let mut x = vec![plane];
    for conv in &w.convs {
        x = conv3x3(&x, &conv.weight, &conv.bias, &conv.bn);
    }
    let flat: Vec<f64> = x.into_iter().flatten().flatten().collect();
    let head = &w.head;
    let (s, h, k) = (head.slice_len, head.hidden, head.out_per_branch);
    let mut out = Vec::new();
    for b in 0..head.branches {
        let slice = &flat[b * s..(b + 1) * s];
        let hidden: Vec<f64> = (0..h)
            .map(|j| {
                let z = (0..s).map(|i| head.w1[(b * h + j) * s + i] * slice[i]).sum::<f64>() + head.b1[b * h + j];
                elu(batch_norm(&head.bn1, b * h + j, z))
            })
            .collect();
        for j in 0..k {
            out.push((0..h).map(|i| head.w2[(b * k + j) * h + i] * hidden[i]).sum::<f64>() + head.b2[b * k + j]);
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    out.into_iter().map(|v| v / norm).collect()
}

fn seeded_embedder() -> (EmbedderWeights, Vec<LogMelFrame>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let mut w = EmbedderWeights::random(EmbedderTopology::with_dim(96), &mut rng).unwrap();
    for c in &mut w.convs {
        perturb(&mut c.bn, &mut rng);
        c.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    perturb(&mut w.head.bn1, &mut rng);
    let window = frames(&mut rng, 96);
    (w, window)
}

/// First four components recorded from `embedder_reference` on
/// `seeded_embedder()`.
const EMBEDDER_GOLDEN: [f64; 4] = [
    0.01661213552676453,
    -0.07664444040082721,
    0.03361471794212292,
    0.00772075773048108,
];

#[test]
fn embedder_matches_the_layer_by_layer_reference() {
    let (w, window) = seeded_embedder();
    let reference = embedder_reference(&w, &window);
    let out = w.embed_batch(&[&window]).unwrap();
    assert_eq!(out.len(), 96);
    let worst = out.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-12, "max |fast - reference| = {worst:e}");
    for (r, g) in reference.iter().zip(EMBEDDER_GOLDEN) {
        assert!((r - g).abs() <= 1e-12, "reference head {:.17?}", &reference[..4]);
    }
    // The published f32 fingerprint is the same vector.
    let fp = w.fingerprint_window(&window).unwrap();
    for (a, b) in fp.values.iter().zip(&reference) {
        assert!((*a as f64 - b).abs() <= 1e-6);
    }
}
