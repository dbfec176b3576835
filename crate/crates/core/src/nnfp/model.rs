use rand::Rng;

use super::{conv_out, EmbedderError, EmbedderTopology, Fingerprint, FINGERPRINT_HOP_FRAMES};
use crate::frontend::LogMelFrame;
use crate::nn::{elu, elu_grad_from_output, gemm, normal_vec, BatchNorm, BN_EPS};
use crate::weights::{Tensor, TensorFile, WeightsError, EMBEDDER_MAGIC};

/// 3x3, stride-2, pad-1 convolution followed by batch norm and ELU.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `out x (in * 9)`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn: Option<BatchNorm>,
}

/// Two-level divide-and-encode head. Branch `b` reads only feature slice `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeHead {
    pub branches: usize,
    pub slice_len: usize,
    pub hidden: usize,
    pub out_per_branch: usize,
    /// `branches x hidden x slice_len`
    pub w1: Vec<f64>,
    /// `branches x hidden`
    pub b1: Vec<f64>,
    /// Over `branches * hidden` channels.
    pub bn1: Option<BatchNorm>,
    /// `branches x out_per_branch x hidden`
    pub w2: Vec<f64>,
    /// `branches x out_per_branch`
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderWeights {
    pub topology: EmbedderTopology,
    pub convs: Vec<Conv2d>,
    pub head: EncodeHead,
}

fn affine_of(bn: &Option<BatchNorm>, n: usize) -> (Vec<f64>, Vec<f64>) {
    match bn {
        Some(b) => b.affine(),
        None => (vec![1.0; n], vec![0.0; n]),
    }
}

/// Output columns `ow` whose input column `2 ow + k - 1` lies in `0..w`.
fn valid_range(k: usize, w: usize, wo: usize) -> std::ops::Range<usize> {
    let lo = usize::from(k == 0);
    let hi = ((w + 1 - k) / 2 + usize::from((w + 1 - k) % 2 != 0)).min(wo);
    lo..hi.max(lo)
}

/// Unfolds `(cin, n, h, w)` into `(cin * 9) x (n * ho * wo)` patch columns.
fn im2col(x: &[f64], cin: usize, n: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (conv_out(h), conv_out(w));
    let p = n * ho * wo;
    let mut cols = vec![0.0; cin * 9 * p];
    for ci in 0..cin {
        for kh in 0..3 {
            for kw in 0..3 {
                let row = &mut cols[((ci * 9) + kh * 3 + kw) * p..][..p];
                let cols_ok = valid_range(kw, w, wo);
                for s in 0..n {
                    let plane = &x[(ci * n + s) * h * w..][..h * w];
                    for oh in valid_range(kh, h, ho) {
                        let src = &plane[(2 * oh + kh - 1) * w..][..w];
                        let dst = &mut row[(s * ho + oh) * wo..][..wo];
                        for ow in cols_ok.clone() {
                            dst[ow] = src[2 * ow + kw - 1];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], cin: usize, n: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (conv_out(h), conv_out(w));
    let p = n * ho * wo;
    let mut x = vec![0.0; cin * n * h * w];
    for ci in 0..cin {
        for kh in 0..3 {
            for kw in 0..3 {
                let row = &cols[((ci * 9) + kh * 3 + kw) * p..][..p];
                let cols_ok = valid_range(kw, w, wo);
                for s in 0..n {
                    let plane = &mut x[(ci * n + s) * h * w..][..h * w];
                    for oh in valid_range(kh, h, ho) {
                        let dst = &mut plane[(2 * oh + kh - 1) * w..][..w];
                        let src = &row[(s * ho + oh) * wo..][..wo];
                        for ow in cols_ok.clone() {
                            dst[2 * ow + kw - 1] += src[ow];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Activations of a batched forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct BatchCache {
    n: usize,
    cols: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    /// `n x flat_len`
    flat: Vec<f64>,
    /// Per branch, `n x hidden`.
    h_pre: Vec<Vec<f64>>,
    h_post: Vec<Vec<f64>>,
    /// `n x dim`, before normalization.
    raw: Vec<f64>,
    norms: Vec<f64>,
    /// `n x dim`, unit rows.
    pub(crate) out: Vec<f64>,
}

impl EncodeHead {
    pub fn random(
        branches: usize,
        slice_len: usize,
        hidden: usize,
        out_per_branch: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            branches,
            slice_len,
            hidden,
            out_per_branch,
            w1: normal_vec(rng, branches * hidden * slice_len, (2.0 / slice_len as f64).sqrt()),
            b1: vec![0.0; branches * hidden],
            bn1: Some(BatchNorm::identity(branches * hidden)),
            w2: normal_vec(rng, branches * out_per_branch * hidden, (1.0 / hidden as f64).sqrt()),
            b2: vec![0.0; branches * out_per_branch],
        }
    }

    pub fn dim(&self) -> usize {
        self.branches * self.out_per_branch
    }

    /// Encodes one flat feature vector into the concatenated (unnormalized)
    /// branch outputs.
    pub fn encode(&self, features: &[f64]) -> Result<Vec<f64>, EmbedderError> {
        if features.len() != self.branches * self.slice_len {
            return Err(EmbedderError::IndivisibleSplit {
                features: features.len(),
                branches: self.branches,
            });
        }
        let (h_pre, h_post, raw) = self.forward(features, 1);
        let _ = (h_pre, h_post);
        Ok(raw)
    }

    /// Batched head: returns per-branch hidden pre/post activations and the
    /// `n x dim` concatenated output.
    #[allow(clippy::type_complexity)]
    fn forward(&self, flat: &[f64], n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let (s, h, k) = (self.slice_len, self.hidden, self.out_per_branch);
        let f = self.branches * s;
        let d = self.dim();
        let (scale, shift) = affine_of(&self.bn1, self.branches * h);
        let mut raw = vec![0.0; n * d];
        let mut all_pre = Vec::with_capacity(self.branches);
        let mut all_post = Vec::with_capacity(self.branches);
        let mut slice = vec![0.0; n * s];
        for b in 0..self.branches {
            for r in 0..n {
                slice[r * s..(r + 1) * s].copy_from_slice(&flat[r * f + b * s..][..s]);
            }
            let w1 = &self.w1[b * h * s..][..h * s];
            let mut pre = vec![0.0; n * h];
            gemm(n, s, h, 1.0, &slice, false, w1, true, 0.0, &mut pre);
            for r in 0..n {
                for j in 0..h {
                    pre[r * h + j] += self.b1[b * h + j];
                }
            }
            let post: Vec<f64> = pre
                .iter()
                .enumerate()
                .map(|(i, &z)| {
                    let c = b * h + i % h;
                    elu(scale[c] * z + shift[c])
                })
                .collect();
            let w2 = &self.w2[b * k * h..][..k * h];
            let mut out = vec![0.0; n * k];
            gemm(n, h, k, 1.0, &post, false, w2, true, 0.0, &mut out);
            for r in 0..n {
                for j in 0..k {
                    raw[r * d + b * k + j] = out[r * k + j] + self.b2[b * k + j];
                }
            }
            all_pre.push(pre);
            all_post.push(post);
        }
        (all_pre, all_post, raw)
    }
}

impl EmbedderWeights {
    pub fn random(topology: EmbedderTopology, rng: &mut impl Rng) -> Result<Self, EmbedderError> {
        topology.validate()?;
        let maps = topology.feature_maps();
        let convs = maps
            .windows(2)
            .map(|m| {
                let (cin, cout) = (m[0].0, m[1].0);
                Conv2d {
                    weight: normal_vec(rng, cout * cin * 9, (2.0 / (cin * 9) as f64).sqrt()),
                    bias: vec![0.0; cout],
                    bn: Some(BatchNorm::identity(cout)),
                }
            })
            .collect();
        let head = EncodeHead::random(
            topology.branches,
            topology.flat_len() / topology.branches,
            topology.branch_hidden,
            topology.dim / topology.branches,
            rng,
        );
        Ok(Self {
            topology,
            convs,
            head,
        })
    }

    pub fn dim(&self) -> usize {
        self.topology.dim
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        let zbn = |b: &Option<BatchNorm>| {
            b.as_ref().map(|b| BatchNorm {
                gamma: z(&b.gamma),
                beta: z(&b.beta),
                mean: b.mean.clone(),
                var: b.var.clone(),
            })
        };
        Self {
            topology: self.topology.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| Conv2d {
                    weight: z(&c.weight),
                    bias: z(&c.bias),
                    bn: zbn(&c.bn),
                })
                .collect(),
            head: EncodeHead {
                w1: z(&self.head.w1),
                b1: z(&self.head.b1),
                bn1: zbn(&self.head.bn1),
                w2: z(&self.head.w2),
                b2: z(&self.head.b2),
                ..self.head.clone()
            },
        }
    }

    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for c in &self.convs {
            v.extend([&c.weight[..], &c.bias[..]]);
            if let Some(bn) = &c.bn {
                v.extend([&bn.gamma[..], &bn.beta[..]]);
            }
        }
        v.extend([&self.head.w1[..], &self.head.b1[..]]);
        if let Some(bn) = &self.head.bn1 {
            v.extend([&bn.gamma[..], &bn.beta[..]]);
        }
        v.extend([&self.head.w2[..], &self.head.b2[..]]);
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
            if let Some(bn) = &mut c.bn {
                v.push(&mut bn.gamma);
                v.push(&mut bn.beta);
            }
        }
        v.push(&mut self.head.w1);
        v.push(&mut self.head.b1);
        if let Some(bn) = &mut self.head.bn1 {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v.push(&mut self.head.w2);
        v.push(&mut self.head.b2);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Flattens windows into the `(1, n, frames, mel)` input map, removing
    /// each window's mean log-energy (gain invariance).
    pub fn prepare_input(&self, windows: &[&[LogMelFrame]]) -> Result<Vec<f64>, EmbedderError> {
        let t = &self.topology;
        let per = t.input_frames * t.mel_bins;
        let mut x = Vec::with_capacity(windows.len() * per);
        for w in windows {
            if w.len() != t.input_frames {
                return Err(EmbedderError::WrongWindow {
                    expected: t.input_frames,
                    found: w.len(),
                });
            }
            let start = x.len();
            for f in *w {
                let c = &f.coeffs[..t.mel_bins];
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(EmbedderError::NonFinite);
                }
                x.extend(c.iter().map(|&v| v as f64));
            }
            let mean = x[start..].iter().sum::<f64>() / per as f64;
            x[start..].iter_mut().for_each(|v| *v -= mean);
        }
        Ok(x)
    }

    /// Batched forward over `n` prepared windows.
    /// One conv layer on a `(cin, n, h, w)` batch: patch columns,
    /// pre-activation (with bias) and post-activation outputs.
    fn conv_layer(&self, l: usize, x: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let maps = self.topology.feature_maps();
        let conv = &self.convs[l];
        let (cin, h, w) = maps[l];
        let (cout, ho, wo) = maps[l + 1];
        let cols = im2col(x, cin, n, h, w);
        let p = n * ho * wo;
        let mut pre = vec![0.0; cout * p];
        gemm(cout, cin * 9, p, 1.0, &conv.weight, false, &cols, false, 0.0, &mut pre);
        let (scale, shift) = affine_of(&conv.bn, cout);
        let mut post = vec![0.0; cout * p];
        for c in 0..cout {
            let row = &mut pre[c * p..(c + 1) * p];
            let orow = &mut post[c * p..(c + 1) * p];
            for (z, y) in row.iter_mut().zip(orow.iter_mut()) {
                *z += conv.bias[c];
                *y = elu(scale[c] * *z + shift[c]);
            }
        }
        (cols, pre, post)
    }

    pub(crate) fn forward_batch(&self, input: Vec<f64>, n: usize) -> BatchCache {
        let maps = self.topology.feature_maps();
        let mut cache = BatchCache {
            n,
            cols: Vec::new(),
            pre: Vec::new(),
            post: Vec::new(),
            flat: Vec::new(),
            h_pre: Vec::new(),
            h_post: Vec::new(),
            raw: Vec::new(),
            norms: Vec::new(),
            out: Vec::new(),
        };
        let mut x = input;
        for l in 0..self.convs.len() {
            let (cols, pre, post) = self.conv_layer(l, &x, n);
            cache.cols.push(cols);
            cache.pre.push(pre);
            cache.post.push(post);
            x = cache.post.last().unwrap().clone();
        }
        // (c, n, h, w) -> n x (c, h, w)
        let (c_last, h_last, w_last) = *maps.last().unwrap();
        let hw = h_last * w_last;
        let f = c_last * hw;
        let mut flat = vec![0.0; n * f];
        for c in 0..c_last {
            for s in 0..n {
                flat[s * f + c * hw..][..hw].copy_from_slice(&x[(c * n + s) * hw..][..hw]);
            }
        }
        let (h_pre, h_post, raw) = self.head.forward(&flat, n);
        let d = self.head.dim();
        let mut out = raw.clone();
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = &mut out[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        cache.flat = flat;
        cache.h_pre = h_pre;
        cache.h_post = h_post;
        cache.raw = raw;
        cache.norms = norms;
        cache.out = out;
        cache
    }

    /// Accumulates parameter gradients given d(loss)/d(normalized output).
    pub(crate) fn backward_batch(&self, cache: &BatchCache, dout: &[f64], grads: &mut EmbedderWeights) {
        let n = cache.n;
        let d = self.head.dim();
        // L2 normalization.
        let mut draw = vec![0.0; n * d];
        for r in 0..n {
            let y = &cache.out[r * d..(r + 1) * d];
            let dy = &dout[r * d..(r + 1) * d];
            let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
            for i in 0..d {
                draw[r * d + i] = (dy[i] - y[i] * dot) / cache.norms[r];
            }
        }
        // Divide-and-encode head.
        let head = &self.head;
        let (s, h, k) = (head.slice_len, head.hidden, head.out_per_branch);
        let f = head.branches * s;
        let (scale, _) = affine_of(&head.bn1, head.branches * h);
        let mut dflat = vec![0.0; n * f];
        let mut slice = vec![0.0; n * s];
        for b in 0..head.branches {
            let mut dout_b = vec![0.0; n * k];
            for r in 0..n {
                dout_b[r * k..(r + 1) * k].copy_from_slice(&draw[r * d + b * k..][..k]);
            }
            let post = &cache.h_post[b];
            let pre = &cache.h_pre[b];
            gemm(k, n, h, 1.0, &dout_b, true, post, false, 1.0, &mut grads.head.w2[b * k * h..][..k * h]);
            for r in 0..n {
                for j in 0..k {
                    grads.head.b2[b * k + j] += dout_b[r * k + j];
                }
            }
            let mut dh = vec![0.0; n * h];
            gemm(n, k, h, 1.0, &dout_b, false, &head.w2[b * k * h..][..k * h], false, 0.0, &mut dh);
            for i in 0..n * h {
                let c = b * h + i % h;
                let dn = dh[i] * elu_grad_from_output(post[i]);
                if let (Some(bn), Some(gbn)) = (&head.bn1, &mut grads.head.bn1) {
                    gbn.gamma[c] += dn * (pre[i] - bn.mean[c]) / (bn.var[c] + BN_EPS).sqrt();
                    gbn.beta[c] += dn;
                }
                dh[i] = dn * scale[c];
                grads.head.b1[c] += dh[i];
            }
            for r in 0..n {
                slice[r * s..(r + 1) * s].copy_from_slice(&cache.flat[r * f + b * s..][..s]);
            }
            gemm(h, n, s, 1.0, &dh, true, &slice, false, 1.0, &mut grads.head.w1[b * h * s..][..h * s]);
            let mut dslice = vec![0.0; n * s];
            gemm(n, h, s, 1.0, &dh, false, &head.w1[b * h * s..][..h * s], false, 0.0, &mut dslice);
            for r in 0..n {
                dflat[r * f + b * s..][..s].copy_from_slice(&dslice[r * s..(r + 1) * s]);
            }
        }
        // Un-flatten into the last conv map.
        let maps = self.topology.feature_maps();
        let (c_last, h_last, w_last) = *maps.last().unwrap();
        let hw = h_last * w_last;
        let mut dy = vec![0.0; c_last * n * hw];
        for c in 0..c_last {
            for r in 0..n {
                dy[(c * n + r) * hw..][..hw].copy_from_slice(&dflat[r * f + c * hw..][..hw]);
            }
        }
        for (l, conv) in self.convs.iter().enumerate().rev() {
            let (cin, hi, wi) = maps[l];
            let (cout, ho, wo) = maps[l + 1];
            let p = n * ho * wo;
            let (scale, _) = affine_of(&conv.bn, cout);
            let g = &mut grads.convs[l];
            let post = &cache.post[l];
            let pre = &cache.pre[l];
            let mut dz = vec![0.0; cout * p];
            for c in 0..cout {
                let (mut gsum, mut bsum, mut dbias) = (0.0, 0.0, 0.0);
                let (mean, inv) = match &conv.bn {
                    Some(bn) => (bn.mean[c], 1.0 / (bn.var[c] + BN_EPS).sqrt()),
                    None => (0.0, 1.0),
                };
                for i in c * p..(c + 1) * p {
                    let dn = dy[i] * elu_grad_from_output(post[i]);
                    gsum += dn * (pre[i] - mean) * inv;
                    bsum += dn;
                    dz[i] = dn * scale[c];
                    dbias += dz[i];
                }
                if let Some(gbn) = &mut g.bn {
                    gbn.gamma[c] += gsum;
                    gbn.beta[c] += bsum;
                }
                g.bias[c] += dbias;
            }
            let kk = cin * 9;
            gemm(cout, p, kk, 1.0, &dz, false, &cache.cols[l], true, 1.0, &mut g.weight);
            if l > 0 {
                let mut dcols = vec![0.0; kk * p];
                gemm(kk, cout, p, 1.0, &conv.weight, true, &dz, false, 0.0, &mut dcols);
                dy = col2im(&dcols, cin, n, hi, wi);
            }
        }
    }

    /// Unit-norm embeddings for a batch of windows, `n x dim` row-major.
    pub fn embed_batch(&self, windows: &[&[LogMelFrame]]) -> Result<Vec<f64>, EmbedderError> {
        let x = self.prepare_input(windows)?;
        Ok(self.forward_batch(x, windows.len()).out)
    }

    /// Fingerprint of exactly one input window.
    pub fn fingerprint_window(&self, frames: &[LogMelFrame]) -> Result<Fingerprint, EmbedderError> {
        let out = self.embed_batch(&[frames])?;
        let offset_s = frames
            .first()
            .map(|f| f.frame_index as f64 * 0.01)
            .unwrap_or(0.0);
        Ok(Fingerprint {
            values: out.iter().map(|&v| v as f32).collect(),
            song_id: None,
            offset_s,
        })
    }

    /// One fingerprint per 100 frames; fingerprint `i` covers frames
    /// `[100 i, 100 i + window)`.
    pub fn fingerprint_stream(&self, frames: &[LogMelFrame]) -> Result<Vec<Fingerprint>, EmbedderError> {
        let win = self.topology.input_frames;
        let count = self.topology.emissions(frames.len());
        if count == 0 {
            return Err(EmbedderError::StreamTooShort {
                found: frames.len(),
                window: win,
            });
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(count);
        let starts: Vec<usize> = (0..count).map(|i| i * FINGERPRINT_HOP_FRAMES).collect();
        for chunk in starts.chunks(64) {
            let windows: Vec<&[LogMelFrame]> = chunk.iter().map(|&s| &frames[s..s + win]).collect();
            let emb = self.embed_batch(&windows)?;
            for (i, &s) in chunk.iter().enumerate() {
                out.push(Fingerprint {
                    values: emb[i * d..(i + 1) * d].iter().map(|&v| v as f32).collect(),
                    song_id: None,
                    offset_s: (s - starts[0]) as f64 * 0.01 + frames[0].frame_index as f64 * 0.01,
                });
            }
        }
        Ok(out)
    }

    /// Sets every batch-norm layer's frozen statistics from data, first layer
    /// first.
    pub fn calibrate_batch_norm(&mut self, windows: &[&[LogMelFrame]]) -> Result<(), EmbedderError> {
        let n = windows.len();
        let mut x = self.prepare_input(windows)?;
        let maps = self.topology.feature_maps();
        // Layer by layer: each layer's statistics are taken after every
        // earlier layer has been calibrated.
        for l in 0..self.convs.len() {
            let (_, pre, _) = self.conv_layer(l, &x, n);
            let (_, ho, wo) = maps[l + 1];
            let p = n * ho * wo;
            if let Some(bn) = &mut self.convs[l].bn {
                bn.calibrate(&pre, |i| i / p);
            }
            x = self.conv_layer(l, &x, n).2;
        }
        let cache = self.forward_batch(self.prepare_input(windows)?, n);
        let h = self.head.hidden;
        let mut pre = Vec::new();
        let mut chan = Vec::new();
        for (b, hp) in cache.h_pre.iter().enumerate() {
            pre.extend_from_slice(hp);
            chan.extend((0..hp.len()).map(|i| b * h + i % h));
        }
        if let Some(bn) = &mut self.head.bn1 {
            bn.calibrate(&pre, |i| chan[i]);
        }
        Ok(())
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let t = &self.topology;
        let mut f = TensorFile::default();
        f.insert(
            "meta.input",
            Tensor::f32(vec![2], &[t.input_frames as f64, t.mel_bins as f64]),
        );
        let maps = t.feature_maps();
        let put_bn = |f: &mut TensorFile, prefix: &str, bn: &Option<BatchNorm>| {
            if let Some(bn) = bn {
                let c = bn.channels();
                f.insert(format!("{prefix}.bn.gamma"), Tensor::f32(vec![c], &bn.gamma));
                f.insert(format!("{prefix}.bn.beta"), Tensor::f32(vec![c], &bn.beta));
                f.insert(format!("{prefix}.bn.mean"), Tensor::f32(vec![c], &bn.mean));
                f.insert(format!("{prefix}.bn.var"), Tensor::f32(vec![c], &bn.var));
            }
        };
        for (i, c) in self.convs.iter().enumerate() {
            let (cin, cout) = (maps[i].0, maps[i + 1].0);
            f.insert(format!("conv{i}.weight"), Tensor::f32(vec![cout, cin, 3, 3], &c.weight));
            f.insert(format!("conv{i}.bias"), Tensor::f32(vec![cout], &c.bias));
            put_bn(&mut f, &format!("conv{i}"), &c.bn);
        }
        let hd = &self.head;
        let (b, s, h, k) = (hd.branches, hd.slice_len, hd.hidden, hd.out_per_branch);
        f.insert("head.w1", Tensor::f32(vec![b, h, s], &hd.w1));
        f.insert("head.b1", Tensor::f32(vec![b, h], &hd.b1));
        put_bn(&mut f, "head", &hd.bn1);
        f.insert("head.w2", Tensor::f32(vec![b, k, h], &hd.w2));
        f.insert("head.b2", Tensor::f32(vec![b, k], &hd.b2));
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self, EmbedderError> {
        let meta = f.get("meta.input", &[2])?;
        let mut conv_channels = Vec::new();
        while let Some(t) = f.tensors.get(&format!("conv{}.weight", conv_channels.len())) {
            conv_channels.push(t.shape[0]);
        }
        let w1 = f.get_any("head.w1")?;
        let w2 = f.get_any("head.w2")?;
        if w1.shape.len() != 3 || w2.shape.len() != 3 {
            return Err(WeightsError::Topology("head tensors must be rank 3".into()).into());
        }
        let topology = EmbedderTopology {
            input_frames: meta[0] as usize,
            mel_bins: meta[1] as usize,
            conv_channels,
            branches: w1.shape[0],
            branch_hidden: w1.shape[1],
            dim: w2.shape[0] * w2.shape[1],
        };
        topology.validate()?;
        let get_bn = |prefix: &str, c: usize| -> Result<Option<BatchNorm>, WeightsError> {
            if !f.tensors.contains_key(&format!("{prefix}.bn.gamma")) {
                return Ok(None);
            }
            Ok(Some(BatchNorm {
                gamma: f.get(&format!("{prefix}.bn.gamma"), &[c])?,
                beta: f.get(&format!("{prefix}.bn.beta"), &[c])?,
                mean: f.get(&format!("{prefix}.bn.mean"), &[c])?,
                var: f.get(&format!("{prefix}.bn.var"), &[c])?,
            }))
        };
        let maps = topology.feature_maps();
        let convs = (0..topology.conv_channels.len())
            .map(|i| {
                let (cin, cout) = (maps[i].0, maps[i + 1].0);
                Ok(Conv2d {
                    weight: f.get(&format!("conv{i}.weight"), &[cout, cin, 3, 3])?,
                    bias: f.get(&format!("conv{i}.bias"), &[cout])?,
                    bn: get_bn(&format!("conv{i}"), cout)?,
                })
            })
            .collect::<Result<Vec<_>, WeightsError>>()?;
        let b = topology.branches;
        let s = topology.flat_len() / b;
        let h = topology.branch_hidden;
        let k = topology.dim / b;
        let head = EncodeHead {
            branches: b,
            slice_len: s,
            hidden: h,
            out_per_branch: k,
            w1: f.get("head.w1", &[b, h, s])?,
            b1: f.get("head.b1", &[b, h])?,
            bn1: get_bn("head", b * h)?,
            w2: f.get("head.w2", &[b, k, h])?,
            b2: f.get("head.b2", &[b, k])?,
        };
        Ok(Self {
            topology,
            convs,
            head,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_tensor_file().to_bytes(EMBEDDER_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedderError> {
        Self::from_tensor_file(&TensorFile::from_bytes(bytes, EMBEDDER_MAGIC)?)
    }
}

/// Loss helper for gradient checks: `sum(coef * output)` over a batch.
impl EmbedderWeights {
    /// Gradient of `sum_i <coef_i, embed(window_i)>` w.r.t. every trainable
    /// tensor, plus that scalar.
    pub fn linear_probe_gradient(
        &self,
        windows: &[&[LogMelFrame]],
        coef: &[f64],
    ) -> Result<(f64, EmbedderWeights), EmbedderError> {
        let x = self.prepare_input(windows)?;
        let cache = self.forward_batch(x, windows.len());
        let value = cache.out.iter().zip(coef).map(|(a, b)| a * b).sum();
        let mut grads = self.zeros_like();
        self.backward_batch(&cache, coef, &mut grads);
        Ok((value, grads))
    }
}
