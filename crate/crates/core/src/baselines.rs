//! Direct `X → Y` regressors for comparison: pooled least squares (ERM) and
//! the IRMv1 penalty with a scalar multiplier fixed at 1.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CirrlError, Result};
use crate::repr_train::{ReprTrainConfig, Standardizer};
use crate::rng::{derive_seed, rng_from_seed};
use crate::robustness::{Inputs, Predictor};
use crate::scm_gen::MultiEnvDataset;
use crate::tensor_nn::{adam_step, AdamConfig, AdamState, DenseMatrix, Mlp, MlpConfig, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    Erm,
    Irm { lambda: f64 },
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Erm => "erm",
            BaselineKind::Irm { .. } => "irm",
        }
    }
}

pub const DEFAULT_IRM_LAMBDA: f64 = 100.0;
pub const ERM_DROPOUT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub width: usize,
    pub depth: usize,
    pub batch_norm: bool,
    pub dropout_p: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self::from_repr(&ReprTrainConfig::default(), BaselineKind::Erm)
    }
}

impl BaselineConfig {
    /// Same widths, depth, optimizer, schedule and seed as the encoder of a
    /// representation config. Dropout 0.25 for ERM only.
    pub fn from_repr(repr: &ReprTrainConfig, kind: BaselineKind) -> Self {
        Self {
            kind,
            width: repr.width,
            depth: repr.depth,
            batch_norm: repr.batch_norm,
            dropout_p: match kind {
                BaselineKind::Erm => ERM_DROPOUT,
                BaselineKind::Irm { .. } => 0.0,
            },
            lr: repr.lr,
            epochs: repr.epochs,
            batch_size: repr.batch_size,
            seed: repr.seed,
        }
    }

    pub fn with_kind(mut self, kind: BaselineKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CirrlError::InvalidConfig(m));
        if let BaselineKind::Irm { lambda } = self.kind {
            if !(lambda >= 0.0) {
                return bad(format!("IRM lambda must be >= 0, got {lambda}"));
            }
        }
        if self.width == 0 || self.epochs == 0 || self.batch_size < 2 {
            return bad("width, epochs must be >= 1 and batch_size >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) || !(self.lr > 0.0) {
            return bad(format!("need dropout in [0, 1) and lr > 0, got {} and {}", self.dropout_p, self.lr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub config: BaselineConfig,
    pub net: Mlp,
    pub x_scaler: Standardizer,
    pub y_mean: f64,
    pub y_scale: f64,
    /// Mean training objective per epoch (standardized scale).
    pub trace: Vec<f64>,
}

impl BaselineModel {
    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        let out = self.net.forward_eval(&self.x_scaler.apply(x)?)?;
        Ok(out.as_slice().iter().map(|v| v * self.y_scale + self.y_mean).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl Predictor for BaselineModel {
    fn predict_raw(&self, inputs: Inputs<'_>) -> Result<Vec<f64>> {
        self.predict(inputs.x)
    }
}

/// IRMv1 penalty `Σ_e (∂_w MSE^e(w·ŷ)|_{w=1})²` over the groups present in
/// `env`, and its gradient with respect to `ŷ`.
pub fn irm_penalty(pred: &[f64], y: &[f64], env: &[usize], num_envs: usize) -> (f64, Vec<f64>) {
    let mut count = vec![0usize; num_envs];
    let mut slope = vec![0.0; num_envs];
    for ((p, t), &e) in pred.iter().zip(y).zip(env) {
        count[e] += 1;
        slope[e] += 2.0 * (p - t) * p;
    }
    for (s, &c) in slope.iter_mut().zip(&count) {
        if c > 0 {
            *s /= c as f64;
        }
    }
    let value = slope.iter().map(|s| s * s).sum();
    let grad = pred
        .iter()
        .zip(y)
        .zip(env)
        .map(|((p, t), &e)| 2.0 * slope[e] * 2.0 * (2.0 * p - t) / count[e] as f64)
        .collect();
    (value, grad)
}

fn train(data: &MultiEnvDataset, cfg: &BaselineConfig) -> Result<BaselineModel> {
    cfg.validate()?;
    let (x_raw, y_raw, env) = data.pooled();
    if y_raw.is_empty() {
        return Err(CirrlError::Data("no training rows".into()));
    }
    let x_scaler = Standardizer::fit(&x_raw);
    let x = x_scaler.apply(&x_raw)?;
    let y_mean = y_raw.iter().sum::<f64>() / y_raw.len() as f64;
    let sd = (y_raw.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / y_raw.len() as f64).sqrt();
    let y_scale = if sd > 1e-12 { sd } else { 1.0 };
    let y: Vec<f64> = y_raw.iter().map(|v| (v - y_mean) / y_scale).collect();

    let net_cfg = MlpConfig::stack(x.cols(), cfg.width, cfg.depth, 1)
        .with_batch_norm(cfg.batch_norm)
        .with_dropout(cfg.dropout_p)
        .with_seed(derive_seed(cfg.seed, 21));
    let mut net = Mlp::new(net_cfg)?;
    let mut opt = AdamState::new(&net, AdamConfig::with_lr(cfg.lr));
    let mut order_rng = rng_from_seed(derive_seed(cfg.seed, 22));
    let mut drop_rng = rng_from_seed(derive_seed(cfg.seed, 23));
    let lambda = match cfg.kind {
        BaselineKind::Erm => None,
        BaselineKind::Irm { lambda } => Some(lambda),
    };
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let xb = x.select_rows(chunk);
            let yb: Vec<f64> = chunk.iter().map(|&i| y[i]).collect();
            let (out, cache) = net.forward(&xb, Mode::Train, &mut drop_rng)?;
            let pred = out.as_slice();
            let nb = chunk.len() as f64;
            let mut loss = pred.iter().zip(&yb).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / nb;
            let mut grad: Vec<f64> = pred.iter().zip(&yb).map(|(p, t)| 2.0 * (p - t) / nb).collect();
            if let Some(lambda) = lambda {
                if lambda > 0.0 {
                    let eb: Vec<usize> = chunk.iter().map(|&i| env[i]).collect();
                    let (pen, pg) = irm_penalty(pred, &yb, &eb, data.num_envs());
                    loss += lambda * pen;
                    for (g, p) in grad.iter_mut().zip(pg) {
                        *g += lambda * p;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(CirrlError::Diverged {
                    epoch,
                    what: format!("{} loss", cfg.kind.name()),
                });
            }
            let (grads, _) = net.backward(&cache, &DenseMatrix::new(chunk.len(), 1, grad)?)?;
            adam_step(&mut net, &grads, &mut opt)?;
            net.update_running_stats(&cache)?;
            total += loss * nb;
            seen += chunk.len();
        }
        trace.push(total / seen.max(1) as f64);
    }
    Ok(BaselineModel {
        config: cfg.clone(),
        net,
        x_scaler,
        y_mean,
        y_scale,
        trace,
    })
}

/// Pooled MSE regression, ignoring environment labels.
pub fn train_erm(data: &MultiEnvDataset, cfg: &BaselineConfig) -> Result<BaselineModel> {
    train(data, &cfg.clone().with_kind(BaselineKind::Erm))
}

/// IRMv1 regression; `cfg.kind` must be [`BaselineKind::Irm`].
pub fn train_irm(data: &MultiEnvDataset, cfg: &BaselineConfig) -> Result<BaselineModel> {
    if !matches!(cfg.kind, BaselineKind::Irm { .. }) {
        return Err(CirrlError::InvalidConfig("train_irm needs an irm config".into()));
    }
    if data.num_envs() < 2 {
        return Err(CirrlError::Contract("IRM needs at least two environments".into()));
    }
    train(data, cfg)
}
