//! Minimal dense feed-forward networks with hand-written reverse mode.
//!
//! A [`DenseNetwork`] realizes both a client's feature model and the server's
//! head model. Every layer carries a per-neuron mask; a masked neuron outputs
//! exactly zero, receives zero gradient and is never updated.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Column-wise concatenation of blocks sharing a row count.
    pub fn hconcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if let Some(bad) = blocks.iter().find(|b| b.rows != rows) {
            return Err(Error::Shape(format!(
                "cannot concatenate blocks with {} and {rows} rows",
                bad.rows
            )));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Splits columns into consecutive blocks of the given widths.
    pub fn split_cols(&self, widths: &[usize]) -> Result<Vec<Matrix>> {
        let total: usize = widths.iter().sum();
        if total != self.cols {
            return Err(Error::Shape(format!(
                "block widths sum to {total}, matrix has {} columns",
                self.cols
            )));
        }
        let mut out = Vec::with_capacity(widths.len());
        let mut start = 0;
        for &w in widths {
            let mut data = Vec::with_capacity(self.rows * w);
            for r in 0..self.rows {
                data.extend_from_slice(&self.row(r)[start..start + w]);
            }
            out.push(Matrix {
                rows: self.rows,
                cols: w,
                data,
            });
            start += w;
        }
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Squared Frobenius norm.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// One affine layer `y = act(W x + b)` with a per-output-neuron mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// Shape `(out_dim, in_dim)`.
    pub weights: Matrix,
    pub biases: Vec<f64>,
    /// `false` marks a structurally pruned neuron.
    pub neuron_mask: Vec<bool>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(out_dim, in_dim),
            biases: vec![0.0; out_dim],
            neuron_mask: vec![true; out_dim],
            activation,
        }
    }

    /// He-uniform init scaled by fan-in; biases start at zero.
    pub fn he_uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let mut layer = Self::zeros(in_dim, out_dim, activation);
        for w in layer.weights.as_mut_slice() {
            *w = rng.random_range(-limit..limit);
        }
        layer
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn live_neurons(&self) -> usize {
        self.neuron_mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_neurons(&self) -> usize {
        self.out_dim() - self.live_neurons()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let (n, out) = (x.rows(), self.out_dim());
        let mut y = Matrix::zeros(n, out);
        for r in 0..n {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            for (j, yj) in yr.iter_mut().enumerate() {
                if !self.neuron_mask[j] {
                    continue;
                }
                let z: f64 = self.weights.row(j).iter().zip(xr).map(|(w, v)| w * v).sum::<f64>() + self.biases[j];
                *yj = match self.activation {
                    Activation::Relu => z.max(0.0),
                    Activation::Identity => z,
                };
            }
        }
        y
    }
}

/// Ordered stack of dense layers; ReLU on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetwork {
    pub layers: Vec<DenseLayer>,
}

/// A client's feature model. Its prune state lives in the layer masks.
pub type FeatureModel = DenseNetwork;

/// Per-layer parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.as_slice().iter().all(|&v| v == 0.0))
            && self.biases.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

/// Activations retained from a forward pass for use by [`DenseNetwork::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[i + 1]` is layer `i`'s output.
    pub activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("cache holds the input")
    }
}

impl DenseNetwork {
    /// Builds a network over the given widths (`[in, hidden.., out]`) with
    /// He-uniform weights drawn from a ChaCha stream seeded by `seed`.
    pub fn new_seeded(widths: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new_with_rng(widths, &mut rng)
    }

    pub fn new_with_rng<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "network widths {widths:?} need at least two positive entries"
            )));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                DenseLayer::he_uniform(w[0], w[1], act, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    /// Assembles a network from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.biases.len() != l.out_dim() || l.neuron_mask.len() != l.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} bias/mask length does not match out_dim {}",
                    l.out_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.in_dim() * l.out_dim() + l.out_dim()).sum()
    }

    /// Sum of squared parameters, masked neurons included.
    pub fn param_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.norm_sq() + l.biases.iter().map(|b| b * b).sum::<f64>())
            .sum()
    }

    /// Copy with every mask reset to all-true, keeping parameter values.
    pub fn unmasked(&self) -> Self {
        let mut net = self.clone();
        for l in &mut net.layers {
            l.neuron_mask.iter_mut().for_each(|m| *m = true);
        }
        net
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut a = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            a = layer.forward(&a);
        }
        Ok(a)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(activations.last().expect("non-empty"));
            activations.push(next);
        }
        Ok(ForwardCache { activations })
    }

    /// Reverse pass. `upstream` holds per-sample output gradients `dl_i/dy_i`;
    /// parameter gradients are for the batch mean `(1/b) sum_i l_i`. Also returns
    /// the per-sample input gradients `dl_i/dx_i`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<(GradientSet, Matrix)> {
        let out = cache.output();
        if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
            return Err(Error::Shape(format!(
                "upstream gradient is {}x{}, network output is {}x{}",
                upstream.rows(),
                upstream.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let batch = upstream.rows();
        let inv_b = if batch == 0 { 0.0 } else { 1.0 / batch as f64 };
        let mut grads = GradientSet::zeros_like(self);
        let mut delta = upstream.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[li];
            let output = &cache.activations[li + 1];
            // delta := dl/dz for live neurons, zero for masked ones.
            for r in 0..batch {
                let dr = delta.row_mut(r);
                for (j, d) in dr.iter_mut().enumerate() {
                    if !layer.neuron_mask[j] || (layer.activation == Activation::Relu && output.get(r, j) <= 0.0) {
                        *d = 0.0;
                    }
                }
            }
            let gw = &mut grads.weights[li];
            let gb = &mut grads.biases[li];
            for r in 0..batch {
                let xr = input.row(r);
                for (j, &d) in delta.row(r).iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[j] += d;
                    for (g, &x) in gw.row_mut(j).iter_mut().zip(xr) {
                        *g += d * x;
                    }
                }
            }
            gw.scale(inv_b);
            gb.iter_mut().for_each(|g| *g *= inv_b);

            let mut prev = Matrix::zeros(batch, layer.in_dim());
            for r in 0..batch {
                let pr = prev.row_mut(r);
                for (j, &d) in delta.row(r).iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (p, &w) in pr.iter_mut().zip(layer.weights.row(j)) {
                        *p += d * w;
                    }
                }
            }
            delta = prev;
        }
        Ok((grads, delta))
    }

    /// Chain rule through a feature model given per-sample gradients of the
    /// loss with respect to its embedding output.
    pub fn backward_through_embedding(&self, x: &Matrix, upstream: &Matrix) -> Result<GradientSet> {
        let cache = self.forward_cached(x)?;
        self.backward(&cache, upstream).map(|(g, _)| g)
    }

    /// `param -= eta * grad` for live neurons; masked neurons are left untouched.
    pub fn sgd_step(&mut self, grads: &GradientSet, eta: f64) -> Result<()> {
        if eta.is_nan() || eta < 0.0 {
            return Err(Error::Config(format!("step size must be non-negative, got {eta}")));
        }
        if grads.weights.len() != self.layers.len() {
            return Err(Error::Shape("gradient set does not match network depth".into()));
        }
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let gw = &grads.weights[li];
            let gb = &grads.biases[li];
            if gw.rows() != layer.out_dim() || gw.cols() != layer.in_dim() || gb.len() != layer.out_dim() {
                return Err(Error::Shape(format!("gradient shape mismatch at layer {li}")));
            }
            for (j, g_bias) in gb.iter().enumerate() {
                if !layer.neuron_mask[j] {
                    continue;
                }
                for (w, g) in layer.weights.row_mut(j).iter_mut().zip(gw.row(j)) {
                    *w -= eta * g;
                }
                layer.biases[j] -= eta * g_bias;
            }
        }
        Ok(())
    }
}

/// Output of [`loss_and_grad`].
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub head_grads: GradientSet,
    /// Exact `dF/dh` per embedding block, `F` being the batch-mean loss.
    pub embedding_grads: Vec<Matrix>,
}

/// Batch-mean softmax cross-entropy of the head over concatenated embeddings.
pub fn loss_and_grad(
    head: &DenseNetwork,
    embeddings: &Matrix,
    labels: &[usize],
    block_widths: &[usize],
) -> Result<LossGrad> {
    if embeddings.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embedding rows but {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    let cache = head.forward_cached(embeddings)?;
    let logits = cache.output();
    let classes = logits.cols();
    let batch = logits.rows();
    let mut upstream = Matrix::zeros(batch, classes);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Shape(format!("label {y} out of range for {classes} classes")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[y];
        let ur = upstream.row_mut(r);
        for (c, u) in ur.iter_mut().enumerate() {
            *u = (row[c] - log_z).exp();
        }
        ur[y] -= 1.0;
    }
    let loss = if batch == 0 { 0.0 } else { total / batch as f64 };
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(loss));
    }
    let (head_grads, mut input_grad) = head.backward(&cache, &upstream)?;
    if batch > 0 {
        input_grad.scale(1.0 / batch as f64);
    }
    let embedding_grads = input_grad.split_cols(block_widths)?;
    Ok(LossGrad {
        loss,
        head_grads,
        embedding_grads,
    })
}

/// Index of the largest logit per row; lowest index wins ties.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
