//! Dense feed-forward network over a frozen, seed-reproducible weight vector.
//!
//! Weights for layer `l` are stored row-major as a `fan_in x fan_out` block, and
//! the blocks are concatenated in layer order. There are no bias terms, so the
//! parameter count `d` is exactly the number of mask entries.

use std::ops::Range;

use ndarray::{Array2, ArrayView2, Axis};
use sha2::{Digest, Sha256};

use crate::rng::counter_bits;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Identity),
            other => Err(Error::Format(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

/// Validated layer stack.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkArch {
    layers: Vec<Layer>,
}

const ARCH_RECORD_VERSION: u8 = 1;

impl NetworkArch {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArchitecture("no layers".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.fan_in == 0 || layer.fan_out == 0 {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {i} has a zero dimension ({}x{})",
                    layer.fan_in, layer.fan_out
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {i} outputs {} features but layer {} expects {}",
                    pair[0].fan_out,
                    i + 1,
                    pair[1].fan_in
                )));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::InvalidArchitecture(
                "last layer must use the identity activation".into(),
            ));
        }
        Ok(Self { layers })
    }

    /// MLP from a list of widths: ReLU on hidden layers, identity on the output.
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArchitecture(
                "an MLP needs at least an input and an output width".into(),
            ));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer {
                fan_in: w[0],
                fan_out: w[1],
                activation: if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    /// Total number of weights `d`.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.fan_in * l.fan_out).sum()
    }

    /// Flat index range of each layer's weight block.
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.layers
            .iter()
            .map(|l| {
                let r = start..start + l.fan_in * l.fan_out;
                start = r.end;
                r
            })
            .collect()
    }

    /// Widths as `[in, h1, ..., out]` when every hidden layer is ReLU.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.fan_out))
            .collect()
    }

    /// Length-prefixed binary record: `u32 body_len`, then `u8 version`,
    /// `u32 layer_count` and per layer `u32 fan_in, u32 fan_out, u8 activation`.
    /// All integers little-endian.
    pub fn write_record(&self, out: &mut Vec<u8>) {
        let body_len = 1 + 4 + self.layers.len() * 9;
        out.extend_from_slice(&(body_len as u32).to_le_bytes());
        out.push(ARCH_RECORD_VERSION);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.fan_in as u32).to_le_bytes());
            out.extend_from_slice(&(l.fan_out as u32).to_le_bytes());
            out.push(l.activation.code());
        }
    }

    /// Parse a record written by [`write_record`](Self::write_record), returning the
    /// architecture and the number of bytes consumed.
    pub fn read_record(bytes: &[u8]) -> Result<(Self, usize)> {
        let short = || Error::Format("truncated architecture record".into());
        let len_bytes: [u8; 4] = bytes.get(..4).ok_or_else(short)?.try_into().unwrap();
        let body_len = u32::from_le_bytes(len_bytes) as usize;
        let body = bytes.get(4..4 + body_len).ok_or_else(short)?;
        if body.first() != Some(&ARCH_RECORD_VERSION) {
            return Err(Error::Format(format!(
                "unsupported architecture record version {:?}",
                body.first()
            )));
        }
        let count = u32::from_le_bytes(body.get(1..5).ok_or_else(short)?.try_into().unwrap());
        let count = count as usize;
        if body.len() != 5 + count * 9 {
            return Err(Error::Format(format!(
                "architecture record length {} does not match {} layers",
                body.len(),
                count
            )));
        }
        let mut layers = Vec::with_capacity(count);
        for chunk in body[5..].chunks_exact(9) {
            layers.push(Layer {
                fan_in: u32::from_le_bytes(chunk[0..4].try_into().unwrap()) as usize,
                fan_out: u32::from_le_bytes(chunk[4..8].try_into().unwrap()) as usize,
                activation: Activation::from_code(chunk[8])?,
            });
        }
        let arch = Self::new(layers).map_err(|e| Error::Format(e.to_string()))?;
        Ok((arch, 4 + body_len))
    }
}

/// Standard deviation of the Kaiming normal initializer (fan-in mode, ReLU gain).
pub fn kaiming_sigma(fan_in: usize) -> Result<f64> {
    if fan_in == 0 {
        return Err(Error::InvalidArchitecture("fan_in must be at least 1".into()));
    }
    Ok((2.0 / fan_in as f64).sqrt())
}

/// Signed-constant weights `w_i ∈ {-σ_l, +σ_l}`, reproducible from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenWeights {
    seed: u64,
    values: Vec<f64>,
}

impl FrozenWeights {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// SHA-256 over the little-endian bit patterns of the values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Draw the frozen weights. The sign of entry `i` in layer `l` is the low bit of
/// `counter_bits(seed, l, i)`.
pub fn init_frozen_weights(arch: &NetworkArch, seed: u64) -> Result<FrozenWeights> {
    let mut values = Vec::with_capacity(arch.param_count());
    for (l, layer) in arch.layers().iter().enumerate() {
        let sigma = kaiming_sigma(layer.fan_in)?;
        let n = layer.fan_in * layer.fan_out;
        values.extend((0..n).map(|i| {
            if counter_bits(seed, l as u64, i as u64) & 1 == 1 {
                sigma
            } else {
                -sigma
            }
        }));
    }
    Ok(FrozenWeights { seed, values })
}

/// Activations saved by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (the batch itself for layer 0).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Array2<f64>>,
    weights: Vec<f64>,
}

impl ForwardCache {
    pub fn layer_count(&self) -> usize {
        self.pre.len()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

fn layer_view<'a>(weights: &'a [f64], range: Range<usize>, layer: &Layer) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((layer.fan_in, layer.fan_out), &weights[range])
        .expect("layer block matches its declared shape")
}

/// Dense forward pass with the given effective weights.
pub fn forward(
    arch: &NetworkArch,
    effective_weights: &[f64],
    input: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, ForwardCache)> {
    if effective_weights.len() != arch.param_count() {
        return Err(Error::Shape(format!(
            "expected {} weights, got {}",
            arch.param_count(),
            effective_weights.len()
        )));
    }
    if input.ncols() != arch.input_dim() {
        return Err(Error::Shape(format!(
            "expected {} input features, got {}",
            arch.input_dim(),
            input.ncols()
        )));
    }
    let mut inputs = Vec::with_capacity(arch.layers().len());
    let mut pre = Vec::with_capacity(arch.layers().len());
    let mut x = input.to_owned();
    for (layer, range) in arch.layers().iter().zip(arch.layer_ranges()) {
        let z = x.dot(&layer_view(effective_weights, range, layer));
        let out = match layer.activation {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        };
        inputs.push(std::mem::replace(&mut x, out));
        pre.push(z);
    }
    let cache = ForwardCache {
        inputs,
        pre,
        weights: effective_weights.to_vec(),
    };
    Ok((x, cache))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn loss_and_grad(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (batch, classes) = logits.dim();
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let scale = 1.0 / batch as f64;
    let mut grad = Array2::zeros((batch, classes));
    let mut loss = 0.0;
    for ((row, mut g), &y) in logits.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for (gj, &v) in g.iter_mut().zip(row.iter()) {
            *gj = (v - log_z).exp() * scale;
        }
        g[y] -= scale;
    }
    Ok((loss * scale, grad))
}

/// Gradient of the loss with respect to the effective weights, in flat layout.
pub fn backward(
    arch: &NetworkArch,
    cache: &ForwardCache,
    grad_logits: ArrayView2<'_, f64>,
) -> Result<Vec<f64>> {
    if cache.layer_count() != arch.layers().len() || cache.weights.len() != arch.param_count() {
        return Err(Error::Usage("forward cache does not belong to this architecture".into()));
    }
    for (layer, z) in arch.layers().iter().zip(&cache.pre) {
        if z.ncols() != layer.fan_out {
            return Err(Error::Usage("forward cache does not belong to this architecture".into()));
        }
    }
    if grad_logits.dim() != (cache.batch_size(), arch.output_dim()) {
        return Err(Error::Shape(format!(
            "logit gradient has shape {:?}, expected ({}, {})",
            grad_logits.dim(),
            cache.batch_size(),
            arch.output_dim()
        )));
    }
    let ranges = arch.layer_ranges();
    let mut grad_w = vec![0.0; arch.param_count()];
    let mut g = grad_logits.to_owned();
    for l in (0..arch.layers().len()).rev() {
        let layer = &arch.layers()[l];
        if layer.activation == Activation::Relu {
            g.zip_mut_with(&cache.pre[l], |gi, &z| {
                if z <= 0.0 {
                    *gi = 0.0;
                }
            });
        }
        let gw = cache.inputs[l].t().dot(&g);
        grad_w[ranges[l].clone()]
            .iter_mut()
            .zip(gw.iter())
            .for_each(|(dst, &v)| *dst = v);
        if l > 0 {
            g = g.dot(&layer_view(&cache.weights, ranges[l].clone(), layer).t());
        }
    }
    Ok(grad_w)
}

/// Class with the largest logit per row (first index wins ties).
pub fn predict(logits: ArrayView2<'_, f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kaiming_values() {
        assert!((kaiming_sigma(50).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(kaiming_sigma(2).unwrap(), 1.0);
        assert_eq!(kaiming_sigma(8).unwrap(), 0.5);
        assert!(matches!(kaiming_sigma(0), Err(Error::InvalidArchitecture(_))));
    }

    #[test]
    fn arch_validation() {
        assert!(NetworkArch::mlp(&[4]).is_err());
        assert!(NetworkArch::mlp(&[4, 0, 2]).is_err());
        let bad = vec![
            Layer { fan_in: 3, fan_out: 4, activation: Activation::Relu },
            Layer { fan_in: 5, fan_out: 2, activation: Activation::Identity },
        ];
        assert!(NetworkArch::new(bad).is_err());
        let relu_out = vec![Layer { fan_in: 3, fan_out: 2, activation: Activation::Relu }];
        assert!(NetworkArch::new(relu_out).is_err());
        let arch = NetworkArch::mlp(&[784, 200, 200, 10]).unwrap();
        assert_eq!(arch.param_count(), 784 * 200 + 200 * 200 + 200 * 10);
        assert_eq!(arch.widths(), vec![784, 200, 200, 10]);
    }

    #[test]
    fn arch_record_roundtrip_and_rejects_bad_version() {
        let arch = NetworkArch::mlp(&[5, 3, 2]).unwrap();
        let mut buf = Vec::new();
        arch.write_record(&mut buf);
        let (back, used) = NetworkArch::read_record(&buf).unwrap();
        assert_eq!(back, arch);
        assert_eq!(used, buf.len());
        buf[4] = 9;
        assert!(matches!(NetworkArch::read_record(&buf), Err(Error::Format(_))));
        assert!(NetworkArch::read_record(&buf[..6]).is_err());
    }

    #[test]
    fn frozen_weights_tiny_net() {
        let arch = NetworkArch::mlp(&[2, 1]).unwrap();
        let w = init_frozen_weights(&arch, 7).unwrap();
        assert_eq!(w.len(), 2);
        assert!(w.values().iter().all(|&v| v == 1.0 || v == -1.0));
        assert_eq!(w, init_frozen_weights(&arch, 7).unwrap());
    }

    #[test]
    fn frozen_weights_magnitudes_and_balance() {
        let arch = NetworkArch::mlp(&[100, 1000, 10]).unwrap();
        let w = init_frozen_weights(&arch, 42).unwrap();
        for (layer, range) in arch.layers().iter().zip(arch.layer_ranges()) {
            let sigma = kaiming_sigma(layer.fan_in).unwrap();
            assert!(w.values()[range].iter().all(|v| v.abs() == sigma));
        }
        // First layer alone: d = 10^5 entries with common magnitude σ.
        let first = &w.values()[arch.layer_ranges()[0].clone()];
        assert_eq!(first.len(), 100_000);
        let sigma = kaiming_sigma(100).unwrap();
        let mean = first.iter().sum::<f64>() / first.len() as f64;
        assert!(mean.abs() < 3.0 * sigma / (first.len() as f64).sqrt(), "mean {mean}");
        assert_ne!(w.digest(), init_frozen_weights(&arch, 43).unwrap().digest());
    }

    #[test]
    fn identity_forward() {
        let arch = NetworkArch::new(vec![Layer { fan_in: 2, fan_out: 2, activation: Activation::Identity }]).unwrap();
        let x = array![[3.0, 4.0]];
        let (logits, cache) = forward(&arch, &[1.0, 0.0, 0.0, 1.0], x.view()).unwrap();
        assert_eq!(logits, array![[3.0, 4.0]]);
        assert_eq!(cache.layer_count(), 1);
        let (zero, _) = forward(&arch, &[0.0; 4], x.view()).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let arch = NetworkArch::mlp(&[3, 2]).unwrap();
        let x = Array2::<f64>::zeros((1, 3));
        assert!(matches!(forward(&arch, &[0.0; 5], x.view()), Err(Error::Shape(_))));
        let x4 = Array2::<f64>::zeros((1, 4));
        assert!(matches!(forward(&arch, &[0.0; 6], x4.view()), Err(Error::Shape(_))));
    }

    /// Naive triple-loop forward pass used as an oracle.
    fn naive_forward(arch: &NetworkArch, w: &[f64], x: &Array2<f64>) -> Array2<f64> {
        let mut cur: Vec<Vec<f64>> = x.outer_iter().map(|r| r.to_vec()).collect();
        let mut offset = 0;
        for layer in arch.layers() {
            let mut next = vec![vec![0.0; layer.fan_out]; cur.len()];
            for (b, row) in cur.iter().enumerate() {
                for j in 0..layer.fan_out {
                    let mut acc = 0.0;
                    for i in 0..layer.fan_in {
                        acc += row[i] * w[offset + i * layer.fan_out + j];
                    }
                    next[b][j] = match layer.activation {
                        Activation::Relu => acc.max(0.0),
                        Activation::Identity => acc,
                    };
                }
            }
            offset += layer.fan_in * layer.fan_out;
            cur = next;
        }
        let cols = cur[0].len();
        Array2::from_shape_vec((cur.len(), cols), cur.concat()).unwrap()
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = NetworkArch::mlp(&[7, 6, 5, 4]).unwrap();
        let w: Vec<f64> = (0..arch.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Array2::from_shape_fn((9, 7), |_| rng.random_range(-2.0..2.0));
        let (fast, _) = forward(&arch, &w, x.view()).unwrap();
        let slow = naive_forward(&arch, &w, &x);
        let diff = (&fast - &slow).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-10, "max abs diff {diff}");
    }

    #[test]
    fn cross_entropy_values() {
        let (loss, _) = loss_and_grad(array![[0.0, 0.0]].view(), &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        let (loss, grad) = loss_and_grad(array![[1000.0, 0.0]].view(), &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.iter().all(|v| v.is_finite()));
        assert!(matches!(loss_and_grad(array![[0.0, 0.0]].view(), &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn cross_entropy_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Array2::from_shape_fn((4, 5), |_| rng.random_range(-3.0..3.0));
        let labels = [0, 3, 4, 1];
        let (_, grad) = loss_and_grad(logits.view(), &labels).unwrap();
        let h = 1e-5;
        for ((b, j), &g) in grad.indexed_iter() {
            let mut plus = logits.clone();
            plus[(b, j)] += h;
            let mut minus = logits.clone();
            minus[(b, j)] -= h;
            let fd = (loss_and_grad(plus.view(), &labels).unwrap().0
                - loss_and_grad(minus.view(), &labels).unwrap().0)
                / (2.0 * h);
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
            assert!(rel < 1e-5, "({b},{j}): fd {fd} vs {g}");
        }
    }

    #[test]
    fn single_linear_layer_gradient_is_outer_product() {
        let arch = NetworkArch::mlp(&[3, 2]).unwrap();
        let x = array![[1.0, -2.0, 0.5]];
        let (_, cache) = forward(&arch, &[0.3; 6], x.view()).unwrap();
        let g = array![[0.25, -1.0]];
        let grad = backward(&arch, &cache, g.view()).unwrap();
        let expected: Vec<f64> = x.iter().flat_map(|&xi| g.iter().map(move |&gj| xi * gj)).collect();
        assert_eq!(grad, expected);
        let zero = backward(&arch, &cache, Array2::zeros((1, 2)).view()).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let a = NetworkArch::mlp(&[3, 2]).unwrap();
        let b = NetworkArch::mlp(&[3, 4, 2]).unwrap();
        let (_, cache) = forward(&a, &[0.1; 6], Array2::zeros((1, 3)).view()).unwrap();
        assert!(matches!(
            backward(&b, &cache, Array2::zeros((1, 2)).view()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn predict_picks_argmax() {
        assert_eq!(predict(array![[0.1, 0.9], [2.0, -1.0], [1.0, 1.0]].view()), vec![1, 0, 0]);
    }
}
