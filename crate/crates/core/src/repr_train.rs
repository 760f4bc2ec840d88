//! Step one: jointly train encoder, stochastic decoder and prior network by
//! minimizing `L_DPA + α L_G` over pooled multi-environment minibatches.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CirrlError, Result};
use crate::losses::{loss_rl_pass, prior_laws, EnergyBatch, EnergyNets, LossParts, PriorLaw, PriorScale};
use crate::rng::{derive_seed, normal_vec, rng_from_seed};
use crate::scm_gen::MultiEnvDataset;
use crate::tensor_nn::{adam_step, AdamConfig, AdamState, DenseMatrix, Mlp, MlpConfig, Mode};

/// Standard deviations below this are treated as 1 when standardizing.
const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReprTrainConfig {
    pub latent_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Width of the decoder noise; `None` uses the covariate dimension.
    pub dec_noise_dim: Option<usize>,
    /// Noise draws per item in the training estimator.
    pub m: usize,
    pub batch_norm: bool,
    pub prior_scale: PriorScale,
    /// Draws per item for the full-data evaluation of the final loss.
    pub eval_m: usize,
    pub seed: u64,
}

impl Default for ReprTrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            width: 400,
            depth: 2,
            alpha: 0.1,
            lr: 1e-4,
            epochs: 1000,
            batch_size: 256,
            dec_noise_dim: None,
            m: 2,
            batch_norm: true,
            prior_scale: PriorScale::default(),
            eval_m: 4,
            seed: 0,
        }
    }
}

impl ReprTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CirrlError::InvalidConfig(m));
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.width == 0 || self.depth == 0 {
            return bad("width and depth must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2".into());
        }
        if self.m < 2 || self.eval_m < 2 {
            return bad("energy scores need m >= 2".into());
        }
        if !(self.alpha >= 0.0) || !(self.lr > 0.0) {
            return bad(format!("need alpha >= 0 and lr > 0, got {} and {}", self.alpha, self.lr));
        }
        if self.dec_noise_dim == Some(0) {
            return bad("dec_noise_dim must be >= 1".into());
        }
        Ok(())
    }
}

/// Per-feature affine standardization `(x − mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DenseMatrix) -> Self {
        let n = x.rows() as f64;
        let mean = x.column_means();
        let mut var = vec![0.0; x.cols()];
        for row in x.as_slice().chunks_exact(x.cols().max(1)) {
            for (j, v) in row.iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > MIN_SCALE {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.mean.len() {
            return Err(CirrlError::Shape(format!(
                "expected {} columns, got {}",
                self.mean.len(),
                x.cols()
            )));
        }
        Ok(DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
            (x.get(i, j) - self.mean[j]) / self.scale[j]
        }))
    }

    pub fn invert(&self, x: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) * self.scale[j] + self.mean[j])
    }
}

/// Mean training losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss_dpa: f64,
    pub loss_g: f64,
    pub loss_rl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprModel {
    pub config: ReprTrainConfig,
    pub nets: EnergyNets,
    pub env_labels: Vec<usize>,
    pub standardizer: Standardizer,
    /// Full-data evaluation-mode loss before the first update.
    pub initial_loss: LossParts,
    /// Full-data evaluation-mode loss after the last epoch.
    pub final_loss: LossParts,
    pub trace: Vec<EpochLoss>,
}

impl ReprModel {
    pub fn latent_dim(&self) -> usize {
        self.nets.latent_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.standardizer.mean.len()
    }

    /// Training loss trace made monotone by a running minimum.
    pub fn monotone_trace(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trace
            .iter()
            .map(|e| {
                best = best.min(e.loss_rl);
                best
            })
            .collect()
    }

    /// `epoch,loss_dpa,loss_g,loss_rl` rows.
    pub fn trace_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "loss_dpa", "loss_g", "loss_rl"])?;
        for e in &self.trace {
            w.write_record([
                e.epoch.to_string(),
                e.loss_dpa.to_string(),
                e.loss_g.to_string(),
                e.loss_rl.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| CirrlError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.config.validate()?;
        model.nets.validate()?;
        if model.standardizer.mean.len() != model.nets.enc.input_width() {
            return Err(CirrlError::Shape("standardizer does not match encoder input".into()));
        }
        Ok(model)
    }

    /// Position of an environment label in the prior network's one-hot code.
    pub fn env_position(&self, label: usize) -> Result<usize> {
        self.env_labels
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| CirrlError::Data(format!("environment {label} unknown to the model")))
    }

    /// Latent law the prior network assigns to one environment label.
    pub fn prior_law(&self, label: usize) -> Result<PriorLaw> {
        let pos = self.env_position(label)?;
        Ok(prior_laws(&self.nets.prior, self.latent_dim())?.swap_remove(pos))
    }
}

fn build_nets(d: usize, num_envs: usize, cfg: &ReprTrainConfig) -> Result<EnergyNets> {
    let k = cfg.latent_dim;
    let q = cfg.dec_noise_dim.unwrap_or(d);
    let enc = MlpConfig::stack(d, cfg.width, cfg.depth, k)
        .with_batch_norm(cfg.batch_norm)
        .with_seed(derive_seed(cfg.seed, 11));
    let dec = MlpConfig::stack(k + q, cfg.width, cfg.depth, d)
        .with_batch_norm(cfg.batch_norm)
        .with_seed(derive_seed(cfg.seed, 12));
    // the prior only ever sees |E| distinct one-hot rows, so no batch norm
    let prior = MlpConfig::stack(num_envs, cfg.width, cfg.depth, cfg.prior_scale.output_width(k)).with_seed(derive_seed(cfg.seed, 13));
    Ok(EnergyNets {
        enc: Mlp::new(enc)?,
        dec: Mlp::new(dec)?,
        prior: Mlp::new(prior)?,
    })
}

/// Environment position of each pooled row.
fn pooled_standardized(data: &MultiEnvDataset, st: &Standardizer) -> Result<(DenseMatrix, Vec<usize>)> {
    let (x, _, env) = data.pooled();
    Ok((st.apply(&x)?, env))
}

const EVAL_CHUNK: usize = 1024;

/// Evaluation-mode `L_RL` over all rows with noise from a fixed stream.
pub fn evaluate_loss(nets: &EnergyNets, x_std: &DenseMatrix, env: &[usize], alpha: f64, m: usize, seed: u64) -> Result<LossParts> {
    let n = x_std.rows();
    let mut rng = rng_from_seed(seed);
    let (mut dpa, mut prior) = (0.0, 0.0);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let batch = EnergyBatch::sample(
            x_std.select_rows(&idx),
            idx.iter().map(|&i| env[i]).collect(),
            nets.num_envs(),
            m,
            nets.dec_noise_dim(),
            nets.latent_dim(),
            &mut rng,
        )?;
        let pass = loss_rl_pass(nets, &batch, alpha, Mode::Eval, &mut rng)?;
        let w = idx.len() as f64 / n as f64;
        dpa += w * pass.parts.dpa;
        prior += w * pass.parts.prior;
    }
    Ok(LossParts {
        dpa,
        prior,
        total: dpa + alpha * prior,
    })
}

/// Minibatch Adam on `L_RL`. Deterministic in `cfg.seed`.
pub fn train_representation(data: &MultiEnvDataset, cfg: &ReprTrainConfig) -> Result<ReprModel> {
    cfg.validate()?;
    if data.num_envs() < 2 {
        return Err(CirrlError::Contract(
            "representation learning needs at least two environments".into(),
        ));
    }
    let (x_raw, _, _) = data.pooled();
    let standardizer = Standardizer::fit(&x_raw);
    let (x, env) = pooled_standardized(data, &standardizer)?;
    let num_envs = data.num_envs();
    let mut nets = build_nets(x.cols(), num_envs, cfg)?;
    let eval_seed = derive_seed(cfg.seed, 16);
    let initial_loss = evaluate_loss(&nets, &x, &env, cfg.alpha, cfg.eval_m, eval_seed)?;

    let adam = AdamConfig::with_lr(cfg.lr);
    let mut opt_enc = AdamState::new(&nets.enc, adam);
    let mut opt_dec = AdamState::new(&nets.dec, adam);
    let mut opt_prior = AdamState::new(&nets.prior, adam);
    let mut order_rng = rng_from_seed(derive_seed(cfg.seed, 14));
    let mut noise_rng = rng_from_seed(derive_seed(cfg.seed, 15));
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut sum_dpa, mut sum_g, mut seen) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = EnergyBatch::sample(
                x.select_rows(chunk),
                chunk.iter().map(|&i| env[i]).collect(),
                num_envs,
                cfg.m,
                nets.dec_noise_dim(),
                cfg.latent_dim,
                &mut noise_rng,
            )?;
            let pass = loss_rl_pass(&nets, &batch, cfg.alpha, Mode::Train, &mut noise_rng)?;
            if !pass.parts.total.is_finite() {
                return Err(CirrlError::Diverged {
                    epoch,
                    what: "energy loss".into(),
                });
            }
            adam_step(&mut nets.enc, &pass.grads.enc, &mut opt_enc)?;
            adam_step(&mut nets.dec, &pass.grads.dec, &mut opt_dec)?;
            adam_step(&mut nets.prior, &pass.grads.prior, &mut opt_prior)?;
            nets.enc.update_running_stats(&pass.enc_cache)?;
            nets.dec.update_running_stats(&pass.dec_cache)?;
            sum_dpa += pass.parts.dpa * chunk.len() as f64;
            sum_g += pass.parts.prior * chunk.len() as f64;
            seen += chunk.len();
        }
        let (dpa, g) = (sum_dpa / seen as f64, sum_g / seen as f64);
        trace.push(EpochLoss {
            epoch,
            loss_dpa: dpa,
            loss_g: g,
            loss_rl: dpa + cfg.alpha * g,
        });
    }
    let final_loss = evaluate_loss(&nets, &x, &env, cfg.alpha, cfg.eval_m, eval_seed)?;
    if !final_loss.total.is_finite() {
        return Err(CirrlError::Diverged {
            epoch: cfg.epochs,
            what: "final evaluation loss".into(),
        });
    }
    Ok(ReprModel {
        config: cfg.clone(),
        nets,
        env_labels: data.labels(),
        standardizer,
        initial_loss,
        final_loss,
        trace,
    })
}

/// Deterministic latents `enc(x)` (evaluation mode).
pub fn encode(model: &ReprModel, x: &DenseMatrix) -> Result<DenseMatrix> {
    model.nets.enc.forward_eval(&model.standardizer.apply(x)?)
}

/// One stochastic reconstruction `dec(enc(x), ε̃)` per row, on the raw scale.
pub fn sample_reconstruction<R: rand::Rng + ?Sized>(model: &ReprModel, x: &DenseMatrix, rng: &mut R) -> Result<DenseMatrix> {
    let z = encode(model, x)?;
    let k = z.cols();
    let q = model.nets.dec_noise_dim();
    let noise = normal_vec(rng, x.rows() * q);
    let input = DenseMatrix::from_fn(x.rows(), k + q, |i, c| if c < k { z.get(i, c) } else { noise[i * q + c - k] });
    Ok(model.standardizer.invert(&model.nets.dec.forward_eval(&input)?))
}

/// One row of the elbow table; `final_loss` is NaN when training failed.
#[derive(Debug, Clone, PartialEq)]
pub struct ElbowRow {
    pub dim: usize,
    pub final_loss: f64,
    pub error: Option<String>,
}

/// Trains one model per latent dimension (same seed for every dimension).
/// Failures are reported per row and do not stop the others.
pub fn latent_dim_sweep(data: &MultiEnvDataset, cfg: &ReprTrainConfig, dims: &[usize]) -> Result<Vec<ElbowRow>> {
    if dims.is_empty() || dims.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CirrlError::InvalidConfig("dims must be nonempty and strictly ascending".into()));
    }
    Ok(dims
        .par_iter()
        .map(|&dim| {
            let run = ReprTrainConfig {
                latent_dim: dim,
                ..cfg.clone()
            };
            match train_representation(data, &run) {
                Ok(model) => ElbowRow {
                    dim,
                    final_loss: model.final_loss.total,
                    error: None,
                },
                Err(e) => ElbowRow {
                    dim,
                    final_loss: f64::NAN,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}
