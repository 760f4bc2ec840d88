//! Fully connected ReLU networks with optional batch norm and inverted dropout,
//! plus exact reverse-mode gradients for the fixed layer stack
//! `affine -> [batch norm] -> activation -> [dropout]` (last layer affine only).

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::matrix::{gemm, DenseMatrix};
use crate::error::{CirrlError, Result};

pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture of an [`Mlp`]. The activation applies to hidden layers; the
/// output layer is always affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    /// One flag per hidden layer.
    pub batch_norm: Vec<bool>,
    pub dropout_p: f64,
    pub seed: u64,
}

impl MlpConfig {
    /// ReLU network without batch norm or dropout.
    pub fn new(layer_widths: Vec<usize>) -> Self {
        let hidden = layer_widths.len().saturating_sub(2);
        Self {
            layer_widths,
            activation: Activation::Relu,
            batch_norm: vec![false; hidden],
            dropout_p: 0.0,
            seed: 0,
        }
    }

    /// `depth` hidden layers of `width` units between `input` and `output`.
    pub fn stack(input: usize, width: usize, depth: usize, output: usize) -> Self {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(width, depth));
        widths.push(output);
        Self::new(widths)
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = vec![on; self.layer_widths.len().saturating_sub(2)];
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated config")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(CirrlError::InvalidConfig(format!(
                "need at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(CirrlError::InvalidConfig(format!(
                "zero layer width in {:?}",
                self.layer_widths
            )));
        }
        if self.batch_norm.len() != self.layer_widths.len() - 2 {
            return Err(CirrlError::InvalidConfig(format!(
                "{} batch-norm flags for {} hidden layers",
                self.batch_norm.len(),
                self.layer_widths.len() - 2
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(CirrlError::InvalidConfig(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            scale: vec![1.0; width],
            shift: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

/// One affine layer; `weight` is `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_norm: Option<BatchNorm>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<DenseLayer>,
    #[serde(skip, default = "fresh_id")]
    id: u64,
    #[serde(skip)]
    version: u64,
}

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self.layers.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.layers == other.layers
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: DenseMatrix,
    /// Batch-normalized pre-activations (before scale/shift).
    normalized: Option<DenseMatrix>,
    inv_std: Option<Vec<f64>>,
    batch_mean: Option<Vec<f64>>,
    batch_var: Option<Vec<f64>>,
    /// Input of the activation (hidden layers only).
    pre_activation: Option<DenseMatrix>,
    dropout_mask: Option<Vec<f64>>,
}

/// Intermediates of one forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_id: u64,
    version: u64,
    mode: Mode,
    rows: usize,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub bn_scale: Option<Vec<f64>>,
    pub bn_shift: Option<Vec<f64>>,
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: DenseMatrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                    bn_scale: l.batch_norm.as_ref().map(|b| vec![0.0; b.scale.len()]),
                    bn_shift: l.batch_norm.as_ref().map(|b| vec![0.0; b.shift.len()]),
                })
                .collect(),
        }
    }

    /// Flattened views in parameter order (weight, bias, bn scale, bn shift per layer).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias[..]);
            if let Some(s) = &l.bn_scale {
                out.push(&s[..]);
            }
            if let Some(s) = &l.bn_shift {
                out.push(&s[..]);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias[..]);
            if let Some(s) = &mut l.bn_scale {
                out.push(&mut s[..]);
            }
            if let Some(s) = &mut l.bn_shift {
                out.push(&mut s[..]);
            }
        }
        out
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &MlpGrads) -> Result<()> {
        let mut mine = self.tensors_mut();
        let theirs = other.tensors();
        if mine.len() != theirs.len() || mine.iter().zip(&theirs).any(|(a, b)| a.len() != b.len()) {
            return Err(CirrlError::Shape("gradient layouts differ".into()));
        }
        for (a, b) in mine.iter_mut().zip(theirs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Mlp {
    /// He-initialized network: weights `N(0, 2 / fan_in)`, zero biases,
    /// batch norm at identity.
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n_layers = config.layer_widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let fan_in = config.layer_widths[l];
            let fan_out = config.layer_widths[l + 1];
            let std = (2.0 / fan_in as f64).sqrt();
            let values = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    std * z
                })
                .collect();
            let batch_norm = (l + 1 < n_layers && config.batch_norm[l]).then(|| BatchNorm::new(fan_out));
            layers.push(DenseLayer {
                weight: DenseMatrix::from_vec_unchecked(fan_out, fan_in, values),
                bias: vec![0.0; fan_out],
                batch_norm,
            });
        }
        Ok(Self {
            config,
            layers,
            id: fresh_id(),
            version: 0,
        })
    }

    /// Builds a network from explicit layers (used for hand-specified nets and tests).
    pub fn from_layers(config: MlpConfig, layers: Vec<DenseLayer>) -> Result<Self> {
        config.validate()?;
        let net = Self {
            config,
            layers,
            id: fresh_id(),
            version: 0,
        };
        net.check_shapes()?;
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        let w = &self.config.layer_widths;
        if self.layers.len() != w.len() - 1 {
            return Err(CirrlError::Shape(format!(
                "{} layers for widths {:?}",
                self.layers.len(),
                w
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let hidden = l + 1 < self.layers.len();
            let want_bn = hidden && self.config.batch_norm[l];
            let bn_ok = match &layer.batch_norm {
                None => !want_bn,
                Some(b) => {
                    want_bn
                        && [&b.scale, &b.shift, &b.running_mean, &b.running_var]
                            .iter()
                            .all(|v| v.len() == w[l + 1])
                        && b.running_var.iter().all(|v| *v > 0.0)
                }
            };
            if layer.weight.shape() != (w[l + 1], w[l]) || layer.bias.len() != w[l + 1] || !bn_ok {
                return Err(CirrlError::Shape(format!("layer {l} inconsistent with widths {w:?}")));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.config.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.config.output_width()
    }

    /// Trainable parameters, batch-norm scale/shift included.
    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias[..]);
            if let Some(b) = &l.batch_norm {
                out.push(&b.scale[..]);
                out.push(&b.shift[..]);
            }
        }
        out
    }

    /// Mutable parameter views; invalidates outstanding forward caches.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias[..]);
            if let Some(b) = &mut l.batch_norm {
                out.push(&mut b.scale[..]);
                out.push(&mut b.shift[..]);
            }
        }
        out
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.version += 1;
        &mut self.layers
    }

    /// Deterministic inference pass (running batch-norm statistics, no dropout).
    pub fn forward_eval(&self, input: &DenseMatrix) -> Result<DenseMatrix> {
        let mut rng = NoRng;
        self.forward(input, Mode::Eval, &mut rng).map(|(out, _)| out)
    }

    /// Forward pass. Train mode normalizes with batch statistics and draws
    /// inverted-dropout masks from `rng`; the network itself is not mutated
    /// (see [`Mlp::update_running_stats`]).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &DenseMatrix,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(DenseMatrix, ForwardCache)> {
        if input.cols() != self.input_width() {
            return Err(CirrlError::Shape(format!(
                "network expects {} input columns, batch has {}",
                self.input_width(),
                input.cols()
            )));
        }
        if !input.is_finite() {
            return Err(CirrlError::Numeric("non-finite network input".into()));
        }
        let n = input.rows();
        let last = self.layers.len() - 1;
        let p = self.config.dropout_p;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = gemm(&h, false, &layer.weight, true)?;
            a.add_row_vector(&layer.bias);
            let mut cache = LayerCache {
                input: h,
                normalized: None,
                inv_std: None,
                batch_mean: None,
                batch_var: None,
                pre_activation: None,
                dropout_mask: None,
            };
            if l == last {
                caches.push(cache);
                h = a;
                break;
            }
            if let Some(bn) = &layer.batch_norm {
                let (mean, var) = match mode {
                    Mode::Train => column_moments(&a),
                    Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
                let width = a.cols();
                let mut xhat = a;
                for row in xhat.as_mut_slice().chunks_exact_mut(width) {
                    for j in 0..width {
                        row[j] = (row[j] - mean[j]) * inv_std[j];
                    }
                }
                let mut y = xhat.clone();
                for row in y.as_mut_slice().chunks_exact_mut(width) {
                    for j in 0..width {
                        row[j] = bn.scale[j] * row[j] + bn.shift[j];
                    }
                }
                cache.normalized = Some(xhat);
                cache.inv_std = Some(inv_std);
                if mode == Mode::Train {
                    cache.batch_mean = Some(mean);
                    cache.batch_var = Some(var);
                }
                a = y;
            }
            let act = self.config.activation;
            let mut out = a.map(|v| act.apply(v));
            cache.pre_activation = Some(a);
            if mode == Mode::Train && p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..out.as_slice().len())
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                for (v, m) in out.as_mut_slice().iter_mut().zip(&mask) {
                    *v *= m;
                }
                cache.dropout_mask = Some(mask);
            }
            caches.push(cache);
            h = out;
        }
        Ok((
            h,
            ForwardCache {
                net_id: self.id,
                version: self.version,
                mode,
                rows: n,
                layers: caches,
            },
        ))
    }

    /// Reverse-mode pass: parameter gradients and the gradient with respect
    /// to the network input, given the gradient of the output.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &DenseMatrix) -> Result<(MlpGrads, DenseMatrix)> {
        if cache.net_id != self.id || cache.version != self.version {
            return Err(CirrlError::Contract(
                "forward cache is stale: network changed since the forward pass".into(),
            ));
        }
        if output_grad.shape() != (cache.rows, self.output_width()) {
            return Err(CirrlError::Shape(format!(
                "output gradient {:?}, expected ({}, {})",
                output_grad.shape(),
                cache.rows,
                self.output_width()
            )));
        }
        let n = cache.rows as f64;
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d = output_grad.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let lc = &cache.layers[l];
            let mut bn_scale = None;
            let mut bn_shift = None;
            if l != last {
                if let Some(mask) = &lc.dropout_mask {
                    for (g, m) in d.as_mut_slice().iter_mut().zip(mask) {
                        *g *= m;
                    }
                }
                let pre = lc.pre_activation.as_ref().expect("hidden layer cache");
                let act = self.config.activation;
                for (g, z) in d.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *g *= act.derivative(*z);
                }
                if let Some(bn) = &layer.batch_norm {
                    let xhat = lc.normalized.as_ref().expect("bn cache");
                    let inv_std = lc.inv_std.as_ref().expect("bn cache");
                    let width = d.cols();
                    let mut dscale = vec![0.0; width];
                    let mut dshift = vec![0.0; width];
                    for (grow, xrow) in d.as_slice().chunks_exact(width).zip(xhat.as_slice().chunks_exact(width)) {
                        for j in 0..width {
                            dscale[j] += grow[j] * xrow[j];
                            dshift[j] += grow[j];
                        }
                    }
                    match cache.mode {
                        Mode::Train => {
                            // dxhat = d * scale; da = inv_std / n * (n dxhat - sum dxhat - xhat sum(dxhat xhat))
                            let sum_dxhat: Vec<f64> = (0..width).map(|j| dshift[j] * bn.scale[j]).collect();
                            let sum_dxhat_xhat: Vec<f64> = (0..width).map(|j| dscale[j] * bn.scale[j]).collect();
                            for (grow, xrow) in d
                                .as_mut_slice()
                                .chunks_exact_mut(width)
                                .zip(xhat.as_slice().chunks_exact(width))
                            {
                                for j in 0..width {
                                    let dxhat = grow[j] * bn.scale[j];
                                    grow[j] = inv_std[j] / n
                                        * (n * dxhat - sum_dxhat[j] - xrow[j] * sum_dxhat_xhat[j]);
                                }
                            }
                        }
                        Mode::Eval => {
                            for grow in d.as_mut_slice().chunks_exact_mut(width) {
                                for j in 0..width {
                                    grow[j] *= bn.scale[j] * inv_std[j];
                                }
                            }
                        }
                    }
                    bn_scale = Some(dscale);
                    bn_shift = Some(dshift);
                }
            }
            let dw = gemm(&d, true, &lc.input, false)?;
            let db = d.column_sums();
            let dh = gemm(&d, false, &layer.weight, false)?;
            grads.push(LayerGrads {
                weight: dw,
                bias: db,
                bn_scale,
                bn_shift,
            });
            d = dh;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, d))
    }

    /// Folds the batch statistics of a train-mode forward pass into the
    /// running batch-norm estimates (exponential moving average).
    pub fn update_running_stats(&mut self, cache: &ForwardCache) -> Result<()> {
        if cache.net_id != self.id {
            return Err(CirrlError::Contract("cache belongs to a different network".into()));
        }
        if cache.mode != Mode::Train {
            return Ok(());
        }
        let n = cache.rows as f64;
        let unbias = if cache.rows > 1 { n / (n - 1.0) } else { 1.0 };
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(bn), Some(mean), Some(var)) = (&mut layer.batch_norm, &lc.batch_mean, &lc.batch_var) {
                for j in 0..mean.len() {
                    bn.running_mean[j] = BATCH_NORM_MOMENTUM * bn.running_mean[j] + (1.0 - BATCH_NORM_MOMENTUM) * mean[j];
                    bn.running_var[j] =
                        BATCH_NORM_MOMENTUM * bn.running_var[j] + (1.0 - BATCH_NORM_MOMENTUM) * var[j] * unbias;
                }
            }
        }
        self.version += 1;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(text)?;
        net.config.validate()?;
        net.check_shapes()?;
        Ok(net)
    }
}

/// Biased per-column mean and variance.
fn column_moments(a: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = a.rows() as f64;
    let width = a.cols();
    let mean: Vec<f64> = a.column_sums().into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; width];
    for row in a.as_slice().chunks_exact(width) {
        for j in 0..width {
            let c = row[j] - mean[j];
            var[j] += c * c;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// RNG stand-in for passes that never draw (eval mode).
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval-mode forward does not sample")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval-mode forward does not sample")
    }
    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("eval-mode forward does not sample")
    }
}
