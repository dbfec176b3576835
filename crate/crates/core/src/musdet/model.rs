use rand::Rng;

use super::{DetectorError, DetectorTopology, KERNEL, STRIDE};
use crate::frontend::LogMelFrame;
use crate::nn::{normal_vec, sigmoid, BatchNorm};
use crate::weights::{Tensor, TensorFile, WeightsError, DETECTOR_MAGIC};

/// Depthwise (kernel 4, stride 2) followed by pointwise channel mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct SepConv {
    /// `channels x KERNEL`
    pub depthwise: Vec<f64>,
    /// `channels_out x channels_in`
    pub pointwise: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn: Option<BatchNorm>,
}

impl DenseLayer {
    fn out_dim(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorWeights {
    pub topology: DetectorTopology,
    pub convs: Vec<SepConv>,
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

/// Intermediate time lengths observed during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub lengths: Vec<usize>,
    pub flat: usize,
    pub hidden: usize,
    pub probability: f64,
}

/// Activations kept for backpropagation through one window.
#[derive(Debug, Clone)]
pub(crate) struct Cache {
    /// Input to each conv layer, `len x channels`.
    inputs: Vec<Vec<f64>>,
    /// Depthwise outputs.
    depth: Vec<Vec<f64>>,
    /// Pre-normalization pointwise outputs.
    pre: Vec<Vec<f64>>,
    /// Post-ReLU outputs.
    post: Vec<Vec<f64>>,
    flat: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden_post: Vec<f64>,
    pub(crate) logit: f64,
}

impl Cache {
    pub(crate) fn pre_at(&self, layer: usize) -> Vec<f64> {
        self.pre[layer].clone()
    }

    pub(crate) fn hidden_pre(&self) -> Vec<f64> {
        self.hidden_pre.clone()
    }
}

fn affine(bn: &Option<BatchNorm>, n: usize) -> (Vec<f64>, Vec<f64>) {
    match bn {
        Some(b) => b.affine(),
        None => (vec![1.0; n], vec![0.0; n]),
    }
}

impl SepConv {
    /// One output vector from four consecutive input vectors.
    pub(crate) fn step(&self, rows: [&[f64]; KERNEL], scale: &[f64], shift: &[f64], out: &mut [f64]) {
        let c = self.bias.len();
        let mut depth = vec![0.0; c];
        for (ch, d) in depth.iter_mut().enumerate() {
            *d = (0..KERNEL).map(|k| self.depthwise[ch * KERNEL + k] * rows[k][ch]).sum();
        }
        for (o, slot) in out.iter_mut().enumerate() {
            let z: f64 = self.pointwise[o * c..(o + 1) * c]
                .iter()
                .zip(&depth)
                .map(|(w, d)| w * d)
                .sum::<f64>()
                + self.bias[o];
            *slot = (scale[o] * z + shift[o]).max(0.0);
        }
    }

    pub(crate) fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        affine(&self.bn, self.bias.len())
    }
}

impl DenseLayer {
    pub(crate) fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        affine(&self.bn, self.out_dim())
    }

    fn linear(&self, x: &[f64]) -> Vec<f64> {
        let n_in = x.len();
        (0..self.out_dim())
            .map(|o| {
                self.weight[o * n_in..(o + 1) * n_in]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + self.bias[o]
            })
            .collect()
    }
}

impl DetectorWeights {
    /// All-zero network; its output is exactly `sigmoid(0) = 0.5`.
    pub fn zeros(topology: DetectorTopology) -> Self {
        let c = topology.channels;
        let conv = SepConv {
            depthwise: vec![0.0; c * KERNEL],
            pointwise: vec![0.0; c * c],
            bias: vec![0.0; c],
            bn: None,
        };
        Self {
            topology,
            convs: vec![conv; topology.conv_layers],
            hidden: DenseLayer {
                weight: vec![0.0; topology.hidden * topology.flat_len()],
                bias: vec![0.0; topology.hidden],
                bn: None,
            },
            output: DenseLayer {
                weight: vec![0.0; topology.hidden],
                bias: vec![0.0],
                bn: None,
            },
        }
    }

    /// He-initialized weights with identity batch norm on every hidden layer.
    pub fn random(topology: DetectorTopology, rng: &mut impl Rng) -> Self {
        let c = topology.channels;
        let convs = (0..topology.conv_layers)
            .map(|_| SepConv {
                depthwise: normal_vec(rng, c * KERNEL, (1.0 / KERNEL as f64).sqrt()),
                pointwise: normal_vec(rng, c * c, (2.0 / c as f64).sqrt()),
                bias: vec![0.0; c],
                bn: Some(BatchNorm::identity(c)),
            })
            .collect();
        let flat = topology.flat_len();
        Self {
            topology,
            convs,
            hidden: DenseLayer {
                weight: normal_vec(rng, topology.hidden * flat, (2.0 / flat as f64).sqrt()),
                bias: vec![0.0; topology.hidden],
                bn: Some(BatchNorm::identity(topology.hidden)),
            },
            output: DenseLayer {
                weight: normal_vec(rng, topology.hidden, (1.0 / topology.hidden as f64).sqrt()),
                bias: vec![0.0],
                bn: None,
            },
        }
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
            topology: self.topology,
            convs: self
                .convs
                .iter()
                .map(|l| SepConv {
                    depthwise: z(&l.depthwise),
                    pointwise: z(&l.pointwise),
                    bias: z(&l.bias),
                    bn: zbn(&l.bn),
                })
                .collect(),
            hidden: DenseLayer {
                weight: z(&self.hidden.weight),
                bias: z(&self.hidden.bias),
                bn: zbn(&self.hidden.bn),
            },
            output: DenseLayer {
                weight: z(&self.output.weight),
                bias: z(&self.output.bias),
                bn: None,
            },
        }
    }

    /// Trainable tensors in a fixed order (batch-norm statistics excluded).
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for l in &self.convs {
            v.extend([&l.depthwise[..], &l.pointwise[..], &l.bias[..]]);
            if let Some(bn) = &l.bn {
                v.extend([&bn.gamma[..], &bn.beta[..]]);
            }
        }
        v.extend([&self.hidden.weight[..], &self.hidden.bias[..]]);
        if let Some(bn) = &self.hidden.bn {
            v.extend([&bn.gamma[..], &bn.beta[..]]);
        }
        v.extend([&self.output.weight[..], &self.output.bias[..]]);
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.convs {
            v.push(&mut l.depthwise);
            v.push(&mut l.pointwise);
            v.push(&mut l.bias);
            if let Some(bn) = &mut l.bn {
                v.push(&mut bn.gamma);
                v.push(&mut bn.beta);
            }
        }
        v.push(&mut self.hidden.weight);
        v.push(&mut self.hidden.bias);
        if let Some(bn) = &mut self.hidden.bn {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v.push(&mut self.output.weight);
        v.push(&mut self.output.bias);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_window(&self, window: &[LogMelFrame]) -> Result<Vec<f64>, DetectorError> {
        let expected = self.topology.window();
        if window.len() != expected {
            return Err(DetectorError::WrongWindow {
                expected,
                found: window.len(),
            });
        }
        let c = self.topology.channels;
        let mut x = Vec::with_capacity(expected * c);
        for f in window {
            let coeffs = f.coeffs.get(..c).ok_or(DetectorError::WrongWindow {
                expected,
                found: window.len(),
            })?;
            if coeffs.iter().any(|v| !v.is_finite()) {
                return Err(DetectorError::NonFinite);
            }
            x.extend(coeffs.iter().map(|&v| v as f64));
        }
        Ok(x)
    }

    /// Music probability for exactly one window of frames.
    pub fn forward(&self, window: &[LogMelFrame]) -> Result<f64, DetectorError> {
        Ok(self.trace(window)?.probability)
    }

    pub fn trace(&self, window: &[LogMelFrame]) -> Result<ForwardTrace, DetectorError> {
        let x = self.check_window(window)?;
        let cache = self.forward_cached(x);
        let c = self.topology.channels;
        Ok(ForwardTrace {
            lengths: cache.inputs.iter().map(|v| v.len() / c).collect(),
            flat: cache.flat.len(),
            hidden: cache.hidden_post.len(),
            probability: sigmoid(cache.logit),
        })
    }

    /// Forward pass over a flattened `window x channels` input.
    pub(crate) fn forward_cached(&self, input: Vec<f64>) -> Cache {
        let c = self.topology.channels;
        let mut cache = Cache {
            inputs: Vec::new(),
            depth: Vec::new(),
            pre: Vec::new(),
            post: Vec::new(),
            flat: Vec::new(),
            hidden_pre: Vec::new(),
            hidden_post: Vec::new(),
            logit: 0.0,
        };
        let mut x = input;
        for layer in &self.convs {
            let len_in = x.len() / c;
            let len_out = (len_in - KERNEL) / STRIDE + 1;
            let mut depth = vec![0.0; len_out * c];
            for j in 0..len_out {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for k in 0..KERNEL {
                        acc += layer.depthwise[ch * KERNEL + k] * x[(STRIDE * j + k) * c + ch];
                    }
                    depth[j * c + ch] = acc;
                }
            }
            let mut pre = vec![0.0; len_out * c];
            for j in 0..len_out {
                let d = &depth[j * c..(j + 1) * c];
                for o in 0..c {
                    pre[j * c + o] = layer.pointwise[o * c..(o + 1) * c]
                        .iter()
                        .zip(d)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
                        + layer.bias[o];
                }
            }
            let (scale, shift) = layer.affine();
            let post: Vec<f64> = pre
                .iter()
                .enumerate()
                .map(|(i, &z)| (scale[i % c] * z + shift[i % c]).max(0.0))
                .collect();
            cache.inputs.push(x);
            cache.depth.push(depth);
            cache.pre.push(pre);
            x = post.clone();
            cache.post.push(post);
        }
        cache.flat = x;
        cache.hidden_pre = self.hidden.linear(&cache.flat);
        let (hs, ht) = self.hidden.affine();
        cache.hidden_post = cache
            .hidden_pre
            .iter()
            .enumerate()
            .map(|(i, &z)| (hs[i] * z + ht[i]).max(0.0))
            .collect();
        cache.logit = self.output.linear(&cache.hidden_post)[0];
        cache
    }

    /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(logit).
    pub(crate) fn backward(&self, cache: &Cache, dlogit: f64, grads: &mut DetectorWeights) {
        let c = self.topology.channels;
        let h = self.topology.hidden;
        // Output layer.
        let mut dh = vec![0.0; h];
        for i in 0..h {
            grads.output.weight[i] += dlogit * cache.hidden_post[i];
            dh[i] = dlogit * self.output.weight[i];
        }
        grads.output.bias[0] += dlogit;
        // Hidden dense + BN + ReLU.
        let (hs, _) = self.hidden.affine();
        let mut dz = vec![0.0; h];
        for i in 0..h {
            let dn = if cache.hidden_post[i] > 0.0 { dh[i] } else { 0.0 };
            if let (Some(bn), Some(gbn)) = (&self.hidden.bn, &mut grads.hidden.bn) {
                let inv = 1.0 / (bn.var[i] + crate::nn::BN_EPS).sqrt();
                gbn.gamma[i] += dn * (cache.hidden_pre[i] - bn.mean[i]) * inv;
                gbn.beta[i] += dn;
            }
            dz[i] = dn * hs[i];
        }
        let flat_len = cache.flat.len();
        let mut dx = vec![0.0; flat_len];
        for o in 0..h {
            grads.hidden.bias[o] += dz[o];
            let row = &self.hidden.weight[o * flat_len..(o + 1) * flat_len];
            let grow = &mut grads.hidden.weight[o * flat_len..(o + 1) * flat_len];
            for i in 0..flat_len {
                grow[i] += dz[o] * cache.flat[i];
                dx[i] += dz[o] * row[i];
            }
        }
        // Conv stack, last to first.
        for (l, layer) in self.convs.iter().enumerate().rev() {
            let g = &mut grads.convs[l];
            let (scale, _) = layer.affine();
            let input = &cache.inputs[l];
            let depth = &cache.depth[l];
            let pre = &cache.pre[l];
            let post = &cache.post[l];
            let len_out = post.len() / c;
            let mut dpre = vec![0.0; post.len()];
            for i in 0..post.len() {
                let o = i % c;
                let dn = if post[i] > 0.0 { dx[i] } else { 0.0 };
                if let (Some(bn), Some(gbn)) = (&layer.bn, &mut g.bn) {
                    let inv = 1.0 / (bn.var[o] + crate::nn::BN_EPS).sqrt();
                    gbn.gamma[o] += dn * (pre[i] - bn.mean[o]) * inv;
                    gbn.beta[o] += dn;
                }
                dpre[i] = dn * scale[o];
            }
            let mut ddepth = vec![0.0; depth.len()];
            for j in 0..len_out {
                let dzr = &dpre[j * c..(j + 1) * c];
                let dr = &depth[j * c..(j + 1) * c];
                for o in 0..c {
                    let dzo = dzr[o];
                    if dzo == 0.0 {
                        continue;
                    }
                    g.bias[o] += dzo;
                    let w = &layer.pointwise[o * c..(o + 1) * c];
                    let gw = &mut g.pointwise[o * c..(o + 1) * c];
                    for ch in 0..c {
                        gw[ch] += dzo * dr[ch];
                        ddepth[j * c + ch] += dzo * w[ch];
                    }
                }
            }
            let mut dinput = vec![0.0; input.len()];
            for j in 0..len_out {
                for ch in 0..c {
                    let dd = ddepth[j * c + ch];
                    for k in 0..KERNEL {
                        let idx = (STRIDE * j + k) * c + ch;
                        g.depthwise[ch * KERNEL + k] += dd * input[idx];
                        dinput[idx] += dd * layer.depthwise[ch * KERNEL + k];
                    }
                }
            }
            dx = dinput;
        }
    }

    /// Folds batch norm into the preceding linear maps.
    pub fn fold_batch_norm(&self) -> Self {
        let fold = |pw: &[f64], bias: &[f64], bn: &Option<BatchNorm>| -> (Vec<f64>, Vec<f64>) {
            let n_out = bias.len();
            let n_in = pw.len() / n_out;
            let (s, t) = affine(bn, n_out);
            let w = pw
                .iter()
                .enumerate()
                .map(|(i, v)| v * s[i / n_in])
                .collect();
            let b = (0..n_out).map(|o| s[o] * bias[o] + t[o]).collect();
            (w, b)
        };
        let convs = self
            .convs
            .iter()
            .map(|l| {
                let (pointwise, bias) = fold(&l.pointwise, &l.bias, &l.bn);
                SepConv {
                    depthwise: l.depthwise.clone(),
                    pointwise,
                    bias,
                    bn: None,
                }
            })
            .collect();
        let (weight, bias) = fold(&self.hidden.weight, &self.hidden.bias, &self.hidden.bn);
        Self {
            topology: self.topology,
            convs,
            hidden: DenseLayer {
                weight,
                bias,
                bn: None,
            },
            output: self.output.clone(),
        }
    }

    /// Folded float32 tensor file.
    pub fn to_tensor_file(&self) -> TensorFile {
        self.fold_batch_norm().tensors(Tensor::f32)
    }

    fn tensors(&self, make: impl Fn(Vec<usize>, &[f64]) -> Tensor) -> TensorFile {
        let c = self.topology.channels;
        let mut f = TensorFile::default();
        for (i, l) in self.convs.iter().enumerate() {
            f.insert(format!("conv{i}.depthwise"), make(vec![c, KERNEL], &l.depthwise));
            f.insert(format!("conv{i}.pointwise"), make(vec![c, c], &l.pointwise));
            f.insert(format!("conv{i}.bias"), make(vec![c], &l.bias));
        }
        let h = self.topology.hidden;
        f.insert("hidden.weight", make(vec![h, self.topology.flat_len()], &self.hidden.weight));
        f.insert("hidden.bias", make(vec![h], &self.hidden.bias));
        f.insert("output.weight", make(vec![1, h], &self.output.weight));
        f.insert("output.bias", make(vec![1], &self.output.bias));
        f
    }

    /// Rebuilds (folded) weights; the topology is inferred from tensor shapes.
    pub fn from_tensor_file(f: &TensorFile) -> Result<Self, DetectorError> {
        let dw = f.get_any("conv0.depthwise")?;
        let channels = dw.shape[0];
        let mut conv_layers = 0;
        while f.tensors.contains_key(&format!("conv{conv_layers}.depthwise")) {
            conv_layers += 1;
        }
        let hw = f.get_any("hidden.weight")?;
        if hw.shape.len() != 2 || channels == 0 || hw.shape[1] % channels != 0 {
            return Err(WeightsError::Topology("hidden.weight shape".into()).into());
        }
        let topology = DetectorTopology {
            channels,
            conv_layers,
            final_len: hw.shape[1] / channels,
            hidden: hw.shape[0],
        };
        let c = channels;
        let h = topology.hidden;
        let convs = (0..conv_layers)
            .map(|i| {
                Ok(SepConv {
                    depthwise: f.get(&format!("conv{i}.depthwise"), &[c, KERNEL])?,
                    pointwise: f.get(&format!("conv{i}.pointwise"), &[c, c])?,
                    bias: f.get(&format!("conv{i}.bias"), &[c])?,
                    bn: None,
                })
            })
            .collect::<Result<Vec<_>, WeightsError>>()?;
        Ok(Self {
            topology,
            convs,
            hidden: DenseLayer {
                weight: f.get("hidden.weight", &[h, topology.flat_len()])?,
                bias: f.get("hidden.bias", &[h])?,
                bn: None,
            },
            output: DenseLayer {
                weight: f.get("output.weight", &[1, h])?,
                bias: f.get("output.bias", &[1])?,
                bn: None,
            },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_tensor_file().to_bytes(DETECTOR_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DetectorError> {
        Self::from_tensor_file(&TensorFile::from_bytes(bytes, DETECTOR_MAGIC)?)
    }
}

/// Folds batch norm and quantizes every tensor to per-tensor affine 8-bit.
pub fn quantize_weights(w: &DetectorWeights) -> TensorFile {
    w.fold_batch_norm().tensors(Tensor::q8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::MEL_BINS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window(seed: u64, n: usize) -> Vec<LogMelFrame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut coeffs = [0f32; MEL_BINS];
                coeffs.iter_mut().for_each(|c| *c = rng.random_range(-8.0..2.0));
                LogMelFrame {
                    coeffs,
                    frame_index: i as u64,
                }
            })
            .collect()
    }

    #[test]
    fn zero_network_outputs_one_half() {
        let w = DetectorWeights::zeros(DetectorTopology::default());
        assert_eq!(w.forward(&window(1, 446)).unwrap(), 0.5);
    }

    #[test]
    fn trace_follows_the_tabulated_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = DetectorWeights::random(DetectorTopology::default(), &mut rng);
        let t = w.trace(&window(3, 446)).unwrap();
        assert_eq!(t.lengths, vec![446, 222, 110, 54, 26, 12]);
        assert_eq!(t.flat, 160);
        assert_eq!(t.hidden, 8);
        assert!(t.probability > 0.0 && t.probability < 1.0);
    }

    #[test]
    fn wrong_window_and_non_finite_are_rejected() {
        let w = DetectorWeights::zeros(DetectorTopology::default());
        assert_eq!(
            w.forward(&window(1, 445)),
            Err(DetectorError::WrongWindow {
                expected: 446,
                found: 445
            })
        );
        let mut bad = window(1, 446);
        bad[10].coeffs[3] = f32::NAN;
        assert_eq!(w.forward(&bad), Err(DetectorError::NonFinite));
    }

    #[test]
    fn folding_preserves_the_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = DetectorWeights::random(DetectorTopology::default(), &mut rng);
        for l in &mut w.convs {
            let bn = l.bn.as_mut().unwrap();
            bn.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
            bn.beta.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            bn.mean.iter_mut().for_each(|m| *m = rng.random_range(-1.0..1.0));
            bn.var.iter_mut().for_each(|v| *v = rng.random_range(0.5..4.0));
        }
        let x = window(5, 446);
        let a = w.forward(&x).unwrap();
        let b = w.fold_batch_norm().forward(&x).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn quantized_file_fits_the_memory_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = DetectorWeights::random(DetectorTopology::default(), &mut rng);
        let q = quantize_weights(&w);
        assert_eq!(q.payload_bytes(), 8401);
        let bytes = q.to_bytes(DETECTOR_MAGIC);
        assert!(bytes.len() < 10 * 1024, "{} bytes", bytes.len());
        let back = DetectorWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back.topology, w.topology);
    }

    #[test]
    fn float_file_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = DetectorWeights::random(DetectorTopology::default(), &mut rng);
        let back = DetectorWeights::from_bytes(&w.to_bytes()).unwrap();
        let x = window(8, 446);
        let a = w.forward(&x).unwrap();
        let b = back.forward(&x).unwrap();
        assert!((a - b).abs() < 1e-5);
    }
}
