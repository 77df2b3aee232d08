//! Minimal feed-forward network engine.
//!
//! Dense layers with ReLU hidden activations and a linear output layer,
//! exact reverse-mode gradients for that fixed shape, plain SGD updates and a
//! global Lipschitz upper bound from the product of layer spectral norms.

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden layer widths used when the caller does not choose a shape.
pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];

const POWER_ITERATIONS: usize = 200;
const SPECTRAL_SAFETY: f64 = 1.01;

/// One affine layer. `weight` is row-major with shape `rows x cols`
/// (`rows` outputs, `cols` inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weight[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.bias[r];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activations recorded by [`Mlp::forward_cached`]. `inputs[l]` is the input
/// to layer `l`; `pre[l]` its affine output before the activation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Gradients laid out exactly like the parameters of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub layers: Vec<Layer>,
}

impl GradientBuffer {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net.layers.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &GradientBuffer, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w *= s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| *v == 0.0))
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

/// Global Lipschitz bound of a network (valid on any domain).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBound {
    pub value: f64,
    pub method: LipschitzMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LipschitzMethod {
    NormProduct,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `dims = [input, hidden.., output]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let limit = (6.0 / (cols + rows) as f64).sqrt();
                Layer {
                    rows,
                    cols,
                    weight: (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect(),
                    bias: vec![0.0; rows],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Format("network has no layers".into()));
        }
        for (idx, l) in layers.iter().enumerate() {
            if l.weight.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(Error::Format(format!("layer {idx} has inconsistent shapes")));
            }
        }
        for (idx, pair) in layers.windows(2).enumerate() {
            if pair[0].rows != pair[1].cols {
                return Err(Error::Format(format!(
                    "layer {idx} outputs {} values but layer {} expects {}",
                    pair[0].rows,
                    idx + 1,
                    pair[1].cols
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.rows).unwrap_or(0)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.rows));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                agent: 0,
                field: "network input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(self.eval(x))
    }

    /// Unchecked forward pass.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if idx != last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn forward_cached(&self, x: &[f64]) -> ForwardCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.affine(&cur, &mut z);
            let next = if idx != last {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                Vec::new()
            };
            inputs.push(cur);
            pre.push(z);
            cur = next;
        }
        ForwardCache { inputs, pre }
    }

    /// Gradients of `output . upstream` with respect to every parameter and
    /// to the input. The ReLU subgradient at zero is zero.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> (GradientBuffer, Vec<f64>) {
        debug_assert_eq!(upstream.len(), self.output_dim());
        let mut grads = GradientBuffer::zeros_like(self);
        let mut delta = upstream.to_vec();
        let last = self.layers.len() - 1;
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            if idx != last {
                for (d, z) in delta.iter_mut().zip(&cache.pre[idx]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &cache.inputs[idx];
            let g = &mut grads.layers[idx];
            for r in 0..layer.rows {
                let dr = delta[r];
                if dr == 0.0 {
                    continue;
                }
                g.bias[r] += dr;
                let row = &mut g.weight[r * layer.cols..(r + 1) * layer.cols];
                for (w, xi) in row.iter_mut().zip(input) {
                    *w += dr * xi;
                }
            }
            let mut prev = vec![0.0; layer.cols];
            for r in 0..layer.rows {
                let dr = delta[r];
                if dr == 0.0 {
                    continue;
                }
                let row = &layer.weight[r * layer.cols..(r + 1) * layer.cols];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += dr * w;
                }
            }
            delta = prev;
        }
        (grads, delta)
    }

    /// Product of per-layer spectral norms. Each norm comes from 200 power
    /// iterations times a 1.01 safety factor, capped by the Frobenius norm.
    pub fn lipschitz_upper(&self) -> LipschitzBound {
        let value = self
            .layers
            .iter()
            .map(|l| spectral_norm_upper(l.rows, l.cols, &l.weight))
            .product();
        LipschitzBound {
            value,
            method: LipschitzMethod::NormProduct,
        }
    }

    /// `parameter - lr * gradient`, returned as a new network.
    pub fn sgd_step(&self, grads: &GradientBuffer, lr: f64) -> Mlp {
        let mut out = self.clone();
        out.apply_sgd(grads, lr);
        out
    }

    pub fn apply_sgd(&mut self, grads: &GradientBuffer, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, d) in l.weight.iter_mut().zip(&g.weight) {
                *w -= lr * d;
            }
            for (b, d) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * d;
            }
        }
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params());
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
    }

    /// Little-endian f64 blob, layer-major: each layer's weights (row-major)
    /// followed by its biases.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.params_flat().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(dims: &[usize], bytes: &[u8]) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|d| *d == 0) {
            return Err(Error::Format(format!("invalid network dims {dims:?}")));
        }
        let mut net = Mlp::zeros(dims);
        if bytes.len() != 8 * net.num_params() {
            return Err(Error::Format(format!(
                "weight blob has {} bytes, expected {}",
                bytes.len(),
                8 * net.num_params()
            )));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        net.set_params_flat(&params);
        Ok(net)
    }
}

/// Serialized form used inside certificate files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkBlob {
    pub dims: Vec<usize>,
    /// Base64 of the little-endian f64 parameter blob.
    pub weights: String,
}

impl From<&Mlp> for NetworkBlob {
    fn from(net: &Mlp) -> Self {
        Self {
            dims: net.dims(),
            weights: base64::engine::general_purpose::STANDARD.encode(net.to_le_bytes()),
        }
    }
}

impl TryFrom<&NetworkBlob> for Mlp {
    type Error = Error;

    fn try_from(blob: &NetworkBlob) -> Result<Self> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&blob.weights)
            .map_err(|e| Error::Format(format!("bad base64 weight blob: {e}")))?;
        Mlp::from_le_bytes(&blob.dims, &bytes)
    }
}

/// Upper estimate of the largest singular value of a `rows x cols` matrix.
pub fn spectral_norm_upper(rows: usize, cols: usize, w: &[f64]) -> f64 {
    let frob = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if frob == 0.0 {
        return 0.0;
    }
    let power = power_iteration(rows, cols, w, POWER_ITERATIONS) * SPECTRAL_SAFETY;
    power.min(frob)
}

fn power_iteration(rows: usize, cols: usize, w: &[f64], iters: usize) -> f64 {
    // Deterministic, non-symmetric start so it is unlikely to be orthogonal
    // to the leading right singular vector.
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + 0.37 * ((i * 7919) % 13) as f64).collect();
    normalize(&mut v);
    let mut sigma = 0.0;
    let mut u = vec![0.0; rows];
    for _ in 0..iters {
        for r in 0..rows {
            u[r] = w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let mut next = vec![0.0; cols];
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            for (n, a) in next.iter_mut().zip(row) {
                *n += a * u[r];
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        sigma = norm.sqrt();
        next.iter_mut().for_each(|x| *x /= norm);
        v = next;
    }
    // Rayleigh quotient with the final iterate.
    for r in 0..rows {
        u[r] = w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum();
    }
    let rq = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    sigma.max(rq)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Step-decay schedule: halve every `every` epochs.
pub fn step_decay(base_lr: f64, epoch: usize, every: usize) -> f64 {
    if every == 0 {
        return base_lr;
    }
    base_lr * 0.5f64.powi((epoch / every) as i32)
}
