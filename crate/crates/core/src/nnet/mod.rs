//! A small dense network engine with hand-written reverse-mode gradients.
//!
//! Layers: dense, ReLU, batch normalization, pre-activation residual blocks
//! (`y = x + W·relu(norm(x)) + b`), and a sigmoid bounding layer that maps
//! two raw channels to a bounded mean and variance.

mod adam;
mod arch;
mod matrix;

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::sigmoid;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use arch::{build_architecture, ArchKind, ArchOptions, Role};
pub use matrix::Matrix;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by layer {layer} ({kind})")]
    NonFinite { layer: usize, kind: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("tape does not match the network: {0}")]
    Tape(String),
    #[error("checkpoint segment: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Bounds of the truncation layer: `μ ∈ (mu_lo, mu_hi)`, `σ² ∈ (0, var_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounding {
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub var_max: f64,
}

impl Default for Bounding {
    fn default() -> Self {
        Self {
            mu_lo: -4.0,
            mu_hi: 4.0,
            var_max: 1.0,
        }
    }
}

// Raw channels are clipped here; sigmoid(±30) stays strictly inside (0, 1).
const RAW_CLIP: f64 = 30.0;

impl Bounding {
    pub fn new(mu_lo: f64, mu_hi: f64, var_max: f64) -> Result<Self, NetError> {
        let b = Self { mu_lo, mu_hi, var_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.mu_lo < self.mu_hi) || !self.mu_lo.is_finite() || !self.mu_hi.is_finite() {
            return Err(NetError::Config(format!(
                "bounding needs mu_lo < mu_hi, got ({}, {})",
                self.mu_lo, self.mu_hi
            )));
        }
        if !(self.var_max > 0.0) || !self.var_max.is_finite() {
            return Err(NetError::Config(format!("bounding needs var_max > 0, got {}", self.var_max)));
        }
        Ok(())
    }

    /// Maps raw `(μ, σ)` channels to `(μ_f, σ²_f)`.
    pub fn apply(&self, raw_mu: f64, raw_var: f64) -> (f64, f64) {
        let s_mu = sigmoid(raw_mu.clamp(-RAW_CLIP, RAW_CLIP));
        let s_var = sigmoid(raw_var.clamp(-RAW_CLIP, RAW_CLIP));
        (self.mu_lo + (self.mu_hi - self.mu_lo) * s_mu, self.var_max * s_var)
    }

    /// Derivatives of `apply` with respect to the two raw channels.
    pub fn derivative(&self, raw_mu: f64, raw_var: f64) -> (f64, f64) {
        let d = |raw: f64| {
            if raw.abs() > RAW_CLIP {
                0.0
            } else {
                let s = sigmoid(raw);
                s * (1.0 - s)
            }
        };
        ((self.mu_hi - self.mu_lo) * d(raw_mu), self.var_max * d(raw_var))
    }

    /// Upper bound on `E[exp(f)]` for any input.
    pub fn max_expect_exp(&self) -> f64 {
        (self.mu_hi + 0.5 * self.var_max).exp()
    }

    /// Inverse of the variance map, for initialising the raw variance channel.
    pub fn raw_for_var(&self, var: f64) -> f64 {
        let s = (var / self.var_max).clamp(1e-12, 1.0 - 1e-12);
        (s / (1.0 - s)).ln()
    }
}

/// Applies the bounding map row by row to an `n × 2` matrix.
pub fn bounding_forward(raw: &Matrix, bounds: &Bounding) -> Result<Matrix, NetError> {
    bounds.validate()?;
    if raw.cols() != 2 {
        return Err(NetError::Shape(format!("bounding expects 2 columns, got {}", raw.cols())));
    }
    let mut out = Matrix::zeros(raw.rows(), 2);
    for i in 0..raw.rows() {
        let (mu, var) = bounds.apply(raw.get(i, 0), raw.get(i, 1));
        out.set(i, 0, mu);
        out.set(i, 1, var);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `d_in × d_out`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_in, d_out),
            bias: vec![0.0; d_out],
        }
    }

    /// He-normal weights, zero bias.
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / d_in.max(1) as f64).sqrt()).expect("valid std");
        let data = (0..d_in * d_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Matrix::from_vec(d_in, d_out, data),
            bias: vec![0.0; d_out],
        }
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }

    // Returns (dW, db, dx).
    fn backward(&self, x: &Matrix, dy: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
        (x.t_matmul(dy), dy.col_sums(), dy.matmul_t(&self.weight))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Matrix,
    inv_std: Vec<f64>,
    mode: Mode,
}

#[derive(Debug, Clone)]
struct BnBatchStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        Self {
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum,
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    /// Normalizes without scale/shift; returns `x̂`, `1/σ`, and the batch
    /// statistics that were used (train mode only).
    fn normalize(&self, x: &Matrix, mode: Mode) -> (Matrix, Vec<f64>, Option<BnBatchStats>) {
        let (n, d) = (x.rows(), x.cols());
        let (mean, var, stats) = match mode {
            Mode::Train => {
                let mut mean = x.col_sums();
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for i in 0..n {
                    for ((v, &xi), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                        let c = xi - m;
                        *v += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean.clone(), var.clone(), Some(BnBatchStats { mean, var }))
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = Matrix::zeros(n, d);
        for i in 0..n {
            for (j, (o, &xi)) in x_hat.row_mut(i).iter_mut().zip(x.row(i)).enumerate() {
                *o = (xi - mean[j]) * inv_std[j];
            }
        }
        (x_hat, inv_std, stats)
    }

    fn forward(&self, x: &Matrix, mode: Mode) -> (Matrix, BnCache, Option<BnBatchStats>) {
        let (x_hat, inv_std, stats) = self.normalize(x, mode);
        let mut y = x_hat.clone();
        for i in 0..y.rows() {
            for ((v, g), b) in y.row_mut(i).iter_mut().zip(&self.scale).zip(&self.shift) {
                *v = *v * g + b;
            }
        }
        (y, BnCache { x_hat, inv_std, mode }, stats)
    }

    fn update_running(&mut self, stats: &BnBatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }

    // Returns (dscale, dshift, dx).
    fn backward(&self, cache: &BnCache, dy: &Matrix) -> (Vec<f64>, Vec<f64>, Matrix) {
        let (n, d) = (dy.rows(), dy.cols());
        let mut dscale = vec![0.0; d];
        let dshift = dy.col_sums();
        for i in 0..n {
            for ((g, &dyi), &xh) in dscale.iter_mut().zip(dy.row(i)).zip(cache.x_hat.row(i)) {
                *g += dyi * xh;
            }
        }
        let mut dx = Matrix::zeros(n, d);
        match cache.mode {
            Mode::Eval => {
                for i in 0..n {
                    for (j, (o, &dyi)) in dx.row_mut(i).iter_mut().zip(dy.row(i)).enumerate() {
                        *o = dyi * self.scale[j] * cache.inv_std[j];
                    }
                }
            }
            Mode::Train => {
                // dx = (1/σ)(dx̂ − mean(dx̂) − x̂·mean(dx̂·x̂)), dx̂ = dy·scale.
                let nf = n as f64;
                let sum_dxhat: Vec<f64> = dshift.iter().zip(&self.scale).map(|(s, g)| s * g).collect();
                let sum_dxhat_xhat: Vec<f64> =
                    dscale.iter().zip(&self.scale).map(|(s, g)| s * g).collect();
                for i in 0..n {
                    let xh = cache.x_hat.row(i);
                    let dyr = dy.row(i);
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        let dxhat = dyr[j] * self.scale[j];
                        *o = cache.inv_std[j]
                            * (dxhat - sum_dxhat[j] / nf - xh[j] * sum_dxhat_xhat[j] / nf);
                    }
                }
            }
        }
        (dscale, dshift, dx)
    }
}

/// `y = x + dense(relu(norm(x)))`; shape preserving.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub norm: Option<BatchNorm>,
    pub dense: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Relu { dim: usize },
    BatchNorm(BatchNorm),
    Residual(Residual),
    Bounding(Bounding),
}

/// Serializable description of a layer (no parameter values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { d_in: usize, d_out: usize },
    Relu { dim: usize },
    Batchnorm { dim: usize, momentum: f64, epsilon: f64 },
    ResidualBlock { dim: usize, batchnorm: Option<(f64, f64)> },
    Bounding { mu_lo: f64, mu_hi: f64, var_max: f64 },
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Relu { .. } => "relu",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Residual(_) => "residual_block",
            Layer::Bounding(_) => "bounding",
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            Layer::Dense(d) => (d.weight.rows(), d.weight.cols()),
            Layer::Relu { dim } => (*dim, *dim),
            Layer::BatchNorm(bn) => (bn.dim(), bn.dim()),
            Layer::Residual(r) => (r.dense.weight.rows(), r.dense.weight.cols()),
            Layer::Bounding(_) => (2, 2),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(d) => LayerSpec::Dense {
                d_in: d.weight.rows(),
                d_out: d.weight.cols(),
            },
            Layer::Relu { dim } => LayerSpec::Relu { dim: *dim },
            Layer::BatchNorm(bn) => LayerSpec::Batchnorm {
                dim: bn.dim(),
                momentum: bn.momentum,
                epsilon: bn.eps,
            },
            Layer::Residual(r) => LayerSpec::ResidualBlock {
                dim: r.dense.weight.rows(),
                batchnorm: r.norm.as_ref().map(|bn| (bn.momentum, bn.eps)),
            },
            Layer::Bounding(b) => LayerSpec::Bounding {
                mu_lo: b.mu_lo,
                mu_hi: b.mu_hi,
                var_max: b.var_max,
            },
        }
    }

    /// A layer with zero dense parameters and identity batch-norm state.
    pub fn from_spec(spec: &LayerSpec) -> Result<Self, NetError> {
        Ok(match *spec {
            LayerSpec::Dense { d_in, d_out } => Layer::Dense(Dense::zeros(d_in, d_out)),
            LayerSpec::Relu { dim } => Layer::Relu { dim },
            LayerSpec::Batchnorm { dim, momentum, epsilon } => {
                Layer::BatchNorm(BatchNorm::new(dim, momentum, epsilon))
            }
            LayerSpec::ResidualBlock { dim, batchnorm } => Layer::Residual(Residual {
                norm: batchnorm.map(|(m, e)| BatchNorm::new(dim, m, e)),
                dense: Dense::zeros(dim, dim),
            }),
            LayerSpec::Bounding { mu_lo, mu_hi, var_max } => {
                Layer::Bounding(Bounding::new(mu_lo, mu_hi, var_max)?)
            }
        })
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Dense { input: Matrix },
    Relu { input: Matrix },
    BatchNorm(BnCache),
    Residual {
        input_rows: usize,
        bn: Option<BnCache>,
        normed: Matrix,
        act: Matrix,
    },
    Bounding { raw: Matrix },
}

/// Batch-norm statistics from a train-mode pass, one slot per norm layer.
#[derive(Debug, Clone)]
pub struct BatchStats(Vec<Option<BnBatchStats>>);

/// Intermediate values recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<Cache>,
}

/// Per-parameter-array gradients, in [`Network::params`] order.
pub type Grads = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NetError> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn from_specs(specs: &[LayerSpec]) -> Result<Self, NetError> {
        Self::new(specs.iter().map(Layer::from_spec).collect::<Result<_, _>>()?)
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.layers.is_empty() {
            return Err(NetError::Config("network without layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            let (_, out) = pair[0].dims();
            let (inp, _) = pair[1].dims();
            if out != inp {
                return Err(NetError::Shape(format!(
                    "layer {i} ({}) outputs {out} but layer {} ({}) expects {inp}",
                    pair[0].kind(),
                    i + 1,
                    pair[1].kind()
                )));
            }
        }
        for l in &self.layers {
            if let Layer::Residual(r) = l {
                if r.dense.weight.rows() != r.dense.weight.cols() {
                    return Err(NetError::Shape("residual block must be square".into()));
                }
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].dims().0
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.dims().1)
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| match l {
            Layer::BatchNorm(_) => true,
            Layer::Residual(r) => r.norm.is_some(),
            _ => false,
        })
    }

    /// Trainable arrays in declaration order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense(d) => {
                    out.push(d.weight.data());
                    out.push(&d.bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&bn.scale);
                    out.push(&bn.shift);
                }
                Layer::Residual(r) => {
                    if let Some(bn) = &r.norm {
                        out.push(&bn.scale);
                        out.push(&bn.shift);
                    }
                    out.push(r.dense.weight.data());
                    out.push(&r.dense.bias);
                }
                Layer::Relu { .. } | Layer::Bounding(_) => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => {
                    out.push(d.weight.data_mut());
                    out.push(&mut d.bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.scale);
                    out.push(&mut bn.shift);
                }
                Layer::Residual(r) => {
                    if let Some(bn) = &mut r.norm {
                        out.push(&mut bn.scale);
                        out.push(&mut bn.shift);
                    }
                    out.push(r.dense.weight.data_mut());
                    out.push(&mut r.dense.bias);
                }
                Layer::Relu { .. } | Layer::Bounding(_) => {}
            }
        }
        out
    }

    /// Running batch-norm statistics (mean, variance per layer) in order.
    pub fn running_stats(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            let bn = match l {
                Layer::BatchNorm(bn) => Some(bn),
                Layer::Residual(r) => r.norm.as_ref(),
                _ => None,
            };
            if let Some(bn) = bn {
                out.push(&bn.running_mean);
                out.push(&bn.running_var);
            }
        }
        out
    }

    pub fn running_stats_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            let bn = match l {
                Layer::BatchNorm(bn) => Some(bn),
                Layer::Residual(r) => r.norm.as_mut(),
                _ => None,
            };
            if let Some(bn) = bn {
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.len()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Forward pass. In train mode batch-norm layers normalize with batch
    /// statistics and fold them into their running averages.
    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(Matrix, Tape), NetError> {
        let (out, tape, stats) = self.forward_deferred(x, mode)?;
        self.apply_batch_stats(stats);
        Ok((out, tape))
    }

    /// Like [`Network::forward`] but hands back the batch statistics instead
    /// of folding them in, so the caller can apply them later.
    pub fn forward_deferred(&self, x: &Matrix, mode: Mode) -> Result<(Matrix, Tape, BatchStats), NetError> {
        self.run(x, mode).map(|(o, t, s)| (o, t, BatchStats(s)))
    }

    pub fn apply_batch_stats(&mut self, stats: BatchStats) {
        let mut it = stats.0.into_iter();
        for l in &mut self.layers {
            let bn = match l {
                Layer::BatchNorm(bn) => Some(bn),
                Layer::Residual(r) => r.norm.as_mut(),
                _ => None,
            };
            if let Some(bn) = bn {
                if let Some(Some(s)) = it.next() {
                    bn.update_running(&s);
                }
            }
        }
    }

    /// Forward pass that leaves running statistics untouched.
    pub fn forward_frozen(&self, x: &Matrix, mode: Mode) -> Result<(Matrix, Tape), NetError> {
        self.run(x, mode).map(|(o, t, _)| (o, t))
    }

    /// Eval-mode output without recording a tape.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix, NetError> {
        self.run(x, Mode::Eval).map(|(o, _, _)| o)
    }

    #[allow(clippy::type_complexity)]
    fn run(&self, x: &Matrix, mode: Mode) -> Result<(Matrix, Tape, Vec<Option<BnBatchStats>>), NetError> {
        if x.cols() != self.input_dim() {
            return Err(NetError::Shape(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        let mut cur = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let next = match layer {
                Layer::Dense(d) => {
                    let y = d.forward(&cur);
                    caches.push(Cache::Dense { input: cur });
                    y
                }
                Layer::Relu { .. } => {
                    let mut y = cur.clone();
                    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    caches.push(Cache::Relu { input: cur });
                    y
                }
                Layer::BatchNorm(bn) => {
                    let (y, cache, s) = bn.forward(&cur, mode);
                    stats.push(s);
                    caches.push(Cache::BatchNorm(cache));
                    y
                }
                Layer::Residual(r) => {
                    let (normed, bn_cache) = match &r.norm {
                        Some(bn) => {
                            let (y, cache, s) = bn.forward(&cur, mode);
                            stats.push(s);
                            (y, Some(cache))
                        }
                        None => (cur.clone(), None),
                    };
                    let mut act = normed.clone();
                    act.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    let mut y = r.dense.forward(&act);
                    for (o, &xi) in y.data_mut().iter_mut().zip(cur.data()) {
                        *o += xi;
                    }
                    caches.push(Cache::Residual {
                        input_rows: cur.rows(),
                        bn: bn_cache,
                        normed,
                        act,
                    });
                    y
                }
                Layer::Bounding(b) => {
                    let y = bounding_forward(&cur, b)?;
                    caches.push(Cache::Bounding { raw: cur });
                    y
                }
            };
            if !next.is_finite() {
                return Err(NetError::NonFinite {
                    layer: idx,
                    kind: layer.kind(),
                });
            }
            cur = next;
        }
        Ok((cur, Tape { caches }, stats))
    }

    /// Reverse pass: gradients of a scalar whose gradient with respect to the
    /// network output is `out_grad`.
    pub fn backward(&self, tape: &Tape, out_grad: &Matrix) -> Result<(Grads, Matrix), NetError> {
        if tape.caches.len() != self.layers.len() {
            return Err(NetError::Tape(format!(
                "{} cached layers for {} network layers",
                tape.caches.len(),
                self.layers.len()
            )));
        }
        let mut grads_rev: Vec<Vec<f64>> = Vec::new();
        let mut g = out_grad.clone();
        for (idx, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            let mismatch = || NetError::Tape(format!("layer {idx} cache kind differs"));
            g = match (layer, cache) {
                (Layer::Dense(d), Cache::Dense { input }) => {
                    if g.rows() != input.rows() || g.cols() != d.weight.cols() {
                        return Err(NetError::Shape(format!("gradient shape at layer {idx}")));
                    }
                    let (dw, db, dx) = d.backward(input, &g);
                    grads_rev.push(db);
                    grads_rev.push(dw.into_vec());
                    dx
                }
                (Layer::Relu { .. }, Cache::Relu { input }) => {
                    let mut dx = g;
                    for (o, &xi) in dx.data_mut().iter_mut().zip(input.data()) {
                        if xi <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    dx
                }
                (Layer::BatchNorm(bn), Cache::BatchNorm(c)) => {
                    let (ds, db, dx) = bn.backward(c, &g);
                    grads_rev.push(db);
                    grads_rev.push(ds);
                    dx
                }
                (
                    Layer::Residual(r),
                    Cache::Residual {
                        input_rows,
                        bn,
                        normed,
                        act,
                    },
                ) => {
                    if g.rows() != *input_rows {
                        return Err(NetError::Shape(format!("gradient rows at layer {idx}")));
                    }
                    let (dw, db, mut dact) = r.dense.backward(act, &g);
                    grads_rev.push(db);
                    grads_rev.push(dw.into_vec());
                    for (o, &n) in dact.data_mut().iter_mut().zip(normed.data()) {
                        if n <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    let dbranch = match (&r.norm, bn) {
                        (Some(norm), Some(c)) => {
                            let (ds, dsh, dx) = norm.backward(c, &dact);
                            grads_rev.push(dsh);
                            grads_rev.push(ds);
                            dx
                        }
                        (None, None) => dact,
                        _ => return Err(mismatch()),
                    };
                    let mut dx = g;
                    for (o, &b) in dx.data_mut().iter_mut().zip(dbranch.data()) {
                        *o += b;
                    }
                    dx
                }
                (Layer::Bounding(b), Cache::Bounding { raw }) => {
                    let mut dx = Matrix::zeros(raw.rows(), 2);
                    for i in 0..raw.rows() {
                        let (dmu, dvar) = b.derivative(raw.get(i, 0), raw.get(i, 1));
                        dx.set(i, 0, g.get(i, 0) * dmu);
                        dx.set(i, 1, g.get(i, 1) * dvar);
                    }
                    dx
                }
                _ => return Err(mismatch()),
            };
        }
        grads_rev.reverse();
        Ok((grads_rev, g))
    }

    /// Writes a checkpoint segment: `u64` little-endian header length, a JSON
    /// header with the layer specs, then every parameter array followed by
    /// every running-statistics array as little-endian `f64`.
    pub fn write_segment<W: Write>(&self, mut w: W) -> Result<(), NetError> {
        let header = serde_json::to_vec(&self.specs()).map_err(|e| NetError::Format(e.to_string()))?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for arr in self.params().into_iter().chain(self.running_stats()) {
            write_f64s(&mut w, arr)?;
        }
        Ok(())
    }

    pub fn read_segment<R: Read>(mut r: R) -> Result<Self, NetError> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let specs: Vec<LayerSpec> =
            serde_json::from_slice(&header).map_err(|e| NetError::Format(e.to_string()))?;
        let mut net = Network::from_specs(&specs)?;
        for arr in net.params_mut() {
            read_f64s(&mut r, arr)?;
        }
        for arr in net.running_stats_mut() {
            read_f64s(&mut r, arr)?;
        }
        Ok(net)
    }
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> std::io::Result<()> {
    let mut buf = vec![0u8; out.len() * 8];
    r.read_exact(&mut buf)?;
    for (o, chunk) in out.iter_mut().zip(buf.chunks_exact(8)) {
        *o = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
