//! Minimal dense network engine: forward pass, backpropagation, SGD with
//! momentum and L2 weight decay, and finite-difference gradient checking.
//!
//! Everything is `f64`. Weights are row-major `(out_dim, in_dim)`. Batched
//! buffers are sample-major: `batch * dim` values, one sample per row.

mod gradcheck;
mod kernels;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

pub use gradcheck::{
    grad_check, grad_check_with, min_abs_preactivation, relative_error, CoordinateSelection, GradCheckReport,
    ParamRef,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig(format!("layer dims must be positive, got {in_dim}x{out_dim}")));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::dims("layer weights", in_dim * out_dim, weights.len()));
        }
        if bias.len() != out_dim {
            return Err(Error::dims("layer bias", out_dim, bias.len()));
        }
        Ok(Self { in_dim, out_dim, weights, bias, activation })
    }

    /// Zero-mean Gaussian weights (std `sqrt(2/in)` before a ReLU,
    /// `sqrt(1/in)` otherwise) and zero biases.
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig(format!("layer dims must be positive, got {in_dim}x{out_dim}")));
        }
        let gain = match activation {
            Activation::Relu => 2.0,
            Activation::Identity => 1.0,
        };
        let normal = Normal::new(0.0, (gain / in_dim as f64).sqrt())
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let weights = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
        Self::from_parts(in_dim, out_dim, weights, vec![0.0; out_dim], activation)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Fully connected feed-forward network. Every layer but the last is ReLU,
/// the last is Identity.
pub struct Network {
    layers: Vec<DenseLayer>,
    // Changes on every mutation; caches remember the stamp they were built with.
    stamp: u64,
    // Input-major copies of the weights for the forward kernel, built lazily
    // and dropped on every mutation.
    transposed: OnceLock<Vec<Vec<f64>>>,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self { layers: self.layers.clone(), stamp: fresh_stamp(), transposed: OnceLock::new() }
    }
}

impl fmt::Debug for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network").field("layers", &self.layers).field("stamp", &self.stamp).finish()
    }
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::InvalidConfig(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            let want = if i == last { Activation::Identity } else { Activation::Relu };
            if layer.activation != want {
                return Err(Error::InvalidConfig(format!(
                    "layer {i} must use {want:?} activation, found {:?}",
                    layer.activation
                )));
            }
        }
        Ok(Self { layers, stamp: fresh_stamp(), transposed: OnceLock::new() })
    }

    fn touch(&mut self) {
        self.stamp = fresh_stamp();
        self.transposed = OnceLock::new();
    }

    fn transposed(&self) -> &[Vec<f64>] {
        self.transposed.get_or_init(|| {
            self.layers.iter().map(|l| kernels::transpose(&l.weights, l.out_dim, l.in_dim)).collect()
        })
    }

    /// Builds a randomly initialized network with the given layer widths,
    /// `dims[0]` being the input dimension.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig("need an input dim and at least one layer".into()));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Identity } else { Activation::Relu };
                DenseLayer::init(w[0], w[1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Layer widths including the input, e.g. `[128, 512, 512, 1]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.out_dim)).collect()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable access to the layers. Invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.touch();
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Parameters flattened layer by layer, weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`Network::params`] for a network with layer widths `dims`.
    pub fn from_flat(dims: &[usize], params: &[f64]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig(format!("need at least two dims, got {dims:?}")));
        }
        let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params.len() != expected {
            return Err(Error::dims("flat parameter count", expected, params.len()));
        }
        let mut rest = params;
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let (weights, tail) = rest.split_at(w[0] * w[1]);
            let (bias, tail) = tail.split_at(w[1]);
            rest = tail;
            let act = if i + 2 == dims.len() { Activation::Identity } else { Activation::Relu };
            layers.push(DenseLayer::from_parts(w[0], w[1], weights.to_vec(), bias.to_vec(), act)?);
        }
        Self::new(layers)
    }

    fn locate(&self, mut flat: usize) -> Option<(usize, bool, usize)> {
        for (li, l) in self.layers.iter().enumerate() {
            if flat < l.weights.len() {
                return Some((li, true, flat));
            }
            flat -= l.weights.len();
            if flat < l.bias.len() {
                return Some((li, false, flat));
            }
            flat -= l.bias.len();
        }
        None
    }

    pub fn param(&self, flat: usize) -> Option<f64> {
        let (li, is_w, i) = self.locate(flat)?;
        let l = &self.layers[li];
        Some(if is_w { l.weights[i] } else { l.bias[i] })
    }

    pub fn set_param(&mut self, flat: usize, value: f64) -> Result<()> {
        let (li, is_w, i) =
            self.locate(flat).ok_or_else(|| Error::dims("parameter index", self.param_count(), flat))?;
        self.touch();
        let l = &mut self.layers[li];
        if is_w {
            l.weights[i] = value;
        } else {
            l.bias[i] = value;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let mut cache = ForwardCache::default();
        self.forward_batch(input, 1, &mut cache)?;
        Ok((cache.output().to_vec(), cache))
    }

    /// Forward pass over `batch` samples stored row-wise in `inputs`. The
    /// cache's buffers are reused across calls.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize, cache: &mut ForwardCache) -> Result<()> {
        if inputs.len() != batch * self.input_dim() {
            return Err(Error::dims("network input", batch * self.input_dim(), inputs.len()));
        }
        let n = self.layers.len();
        cache.stamp = self.stamp;
        cache.batch = batch;
        cache.input.clear();
        cache.input.extend_from_slice(inputs);
        cache.pre.resize_with(n, Vec::new);
        cache.post.resize_with(n, Vec::new);
        let transposed = self.transposed();
        for (li, layer) in self.layers.iter().enumerate() {
            let (done, rest) = cache.post.split_at_mut(li);
            let x: &[f64] = if li == 0 { &cache.input } else { &done[li - 1] };
            let z = &mut cache.pre[li];
            z.resize(batch * layer.out_dim, 0.0);
            kernels::affine_forward(&transposed[li], &layer.bias, layer.in_dim, x, z);
            let a = &mut rest[0];
            a.clear();
            match layer.activation {
                // NaN passes through so corrupted weights stay visible.
                Activation::Relu => a.extend(z.iter().map(|&v| if v < 0.0 { 0.0 } else { v })),
                Activation::Identity => a.extend_from_slice(z),
            }
        }
        Ok(())
    }

    /// Gradients of `sum(output * upstream)` with respect to every parameter.
    pub fn backprop(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros_like(self);
        self.backprop_into(cache, upstream, &mut grads, None)?;
        Ok(grads)
    }

    /// Accumulates parameter gradients into `grads`; writes the gradient with
    /// respect to the network input into `input_grad` when given.
    pub fn backprop_into(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut GradientSet,
        mut input_grad: Option<&mut Vec<f64>>,
    ) -> Result<()> {
        if cache.stamp != self.stamp {
            return Err(Error::StaleCache("network changed since the forward pass".into()));
        }
        if cache.pre.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache has {} layers, network has {}",
                cache.pre.len(),
                self.layers.len()
            )));
        }
        grads.check_shape(self)?;
        let batch = cache.batch;
        if upstream.len() != batch * self.output_dim() {
            return Err(Error::dims("upstream gradient", batch * self.output_dim(), upstream.len()));
        }

        let mut delta: Vec<f64> = upstream.to_vec();
        let mut next = Vec::new();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            if layer.activation == Activation::Relu {
                for (d, &z) in delta.iter_mut().zip(&cache.pre[li]) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x: &[f64] = if li == 0 { &cache.input } else { &cache.post[li - 1] };
            let g = &mut grads.layers[li];
            kernels::affine_param_grad(&delta, x, layer.in_dim, &mut g.weights, &mut g.bias);
            if li > 0 {
                next.resize(batch * layer.in_dim, 0.0);
                kernels::affine_input_grad(&layer.weights, &delta, layer.in_dim, &mut next);
                std::mem::swap(&mut delta, &mut next);
            } else if let Some(out) = input_grad.as_deref_mut() {
                out.resize(batch * layer.in_dim, 0.0);
                kernels::affine_input_grad(&layer.weights, &delta, layer.in_dim, out);
            }
        }
        Ok(())
    }
}

/// Per-layer activations recorded by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    stamp: u64,
    batch: usize,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Network output, `batch * output_dim` values.
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Pre-activations of layer `i`.
    pub fn pre_activation(&self, i: usize) -> &[f64] {
        &self.pre[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    fn check_shape(&self, net: &Network) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(Error::dims("gradient layers", net.layers.len(), self.layers.len()));
        }
        for (g, l) in self.layers.iter().zip(&net.layers) {
            if g.weights.len() != l.weights.len() {
                return Err(Error::dims("gradient weights", l.weights.len(), g.weights.len()));
            }
            if g.bias.len() != l.bias.len() {
                return Err(Error::dims("gradient bias", l.bias.len(), g.bias.len()));
            }
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        for g in &mut self.layers {
            g.weights.iter_mut().for_each(|v| *v = 0.0);
            g.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weights.iter_mut().for_each(|v| *v *= factor);
            g.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Flattened in the same order as [`Network::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(&g.weights);
            out.extend_from_slice(&g.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|g| g.weights.iter().chain(&g.bias).all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().flat_map(|g| g.weights.iter().chain(&g.bias)).fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 100,
            weight_decay: 0.0005,
            momentum: 0.9,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted: it freezes parameters, which end-to-end
        // training relies on.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be a finite value >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: GradientSet,
}

impl SgdState {
    pub fn new(net: &Network) -> Self {
        Self { velocity: GradientSet::zeros_like(net) }
    }

    pub fn velocity(&self) -> &GradientSet {
        &self.velocity
    }
}

/// One SGD step with momentum; weight decay enters as an L2 term on the
/// gradient:
///
/// `v <- momentum * v - lr * (grad + weight_decay * param)`, `param <- param + v`.
pub fn sgd_step(
    net: &mut Network,
    grads: &GradientSet,
    state: &mut SgdState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    grads.check_shape(net)?;
    state.velocity.check_shape(net)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient passed to sgd_step".into()));
    }
    let (lr, mu, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let update = |p: &mut [f64], g: &[f64], v: &mut [f64]| {
        for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = mu * *v - lr * (g + wd * *p);
            *p += *v;
        }
    };
    for ((layer, g), v) in net.layers_mut().iter_mut().zip(&grads.layers).zip(&mut state.velocity.layers) {
        update(&mut layer.weights, &g.weights, &mut v.weights);
        update(&mut layer.bias, &g.bias, &mut v.bias);
    }
    if !net.is_finite() {
        return Err(Error::NonFinite("parameters after sgd_step".into()));
    }
    Ok(())
}
