//! Sample estimators of the energy-score objectives with exact gradients.
//!
//! The decoder sees `[enc(x_i), ε̃_ij]` and the prior network sees a one-hot
//! environment code; both are scored against their targets with the
//! two-sample energy score (β = 1, Euclidean norm).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CirrlError, Result};
use crate::rng::normal_vec;
use crate::tensor_nn::{DenseMatrix, ForwardCache, Mlp, MlpGrads, Mode};

/// One minibatch plus the noise draws that make the estimate reproducible.
/// Noise row `i * m + j` belongs to item `i`, draw `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyBatch {
    pub x: DenseMatrix,
    /// Environment position (not label) of each item, in `0..num_envs`.
    pub env: Vec<usize>,
    pub num_envs: usize,
    pub m: usize,
    pub dec_noise: DenseMatrix,
    pub prior_noise: DenseMatrix,
}

impl EnergyBatch {
    /// Draws `m` standard-normal noise vectors per item for the decoder
    /// (`dec_noise_dim` wide) and for the prior (`latent_dim` wide).
    pub fn sample<R: Rng + ?Sized>(
        x: DenseMatrix,
        env: Vec<usize>,
        num_envs: usize,
        m: usize,
        dec_noise_dim: usize,
        latent_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let rows = x.rows() * m;
        let dec_noise = DenseMatrix::new(rows, dec_noise_dim, normal_vec(rng, rows * dec_noise_dim))?;
        let prior_noise = DenseMatrix::new(rows, latent_dim, normal_vec(rng, rows * latent_dim))?;
        let batch = Self {
            x,
            env,
            num_envs,
            m,
            dec_noise,
            prior_noise,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(CirrlError::InvalidConfig(format!(
                "energy score needs m >= 2 draws per item, got {}",
                self.m
            )));
        }
        let n = self.x.rows();
        if n == 0 {
            return Err(CirrlError::Data("empty batch".into()));
        }
        if self.env.len() != n {
            return Err(CirrlError::Shape(format!("{} env labels for {n} items", self.env.len())));
        }
        if let Some(&e) = self.env.iter().find(|&&e| e >= self.num_envs) {
            return Err(CirrlError::Data(format!(
                "environment index {e} outside 0..{}",
                self.num_envs
            )));
        }
        for (name, noise) in [("decoder", &self.dec_noise), ("prior", &self.prior_noise)] {
            if noise.rows() != n * self.m {
                return Err(CirrlError::Shape(format!(
                    "{name} noise has {} rows, expected {}",
                    noise.rows(),
                    n * self.m
                )));
            }
        }
        Ok(())
    }

    /// Indicator rows, `n × num_envs`.
    pub fn env_onehot(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.n(), self.num_envs, |i, e| if self.env[i] == e { 1.0 } else { 0.0 })
    }

    /// Same batch with items reordered by `perm` (noise rows follow their item).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let m = self.m;
        let noise_rows: Vec<usize> = perm.iter().flat_map(|&i| (0..m).map(move |j| i * m + j)).collect();
        Self {
            x: self.x.select_rows(perm),
            env: perm.iter().map(|&i| self.env[i]).collect(),
            num_envs: self.num_envs,
            m,
            dec_noise: self.dec_noise.select_rows(&noise_rows),
            prior_noise: self.prior_noise.select_rows(&noise_rows),
        }
    }
}

/// Energy-score estimate and its gradients with respect to both arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTerms {
    pub value: f64,
    pub d_targets: DenseMatrix,
    pub d_samples: DenseMatrix,
}

/// `(1/n) Σ_i [(1/m) Σ_j ‖t_i − s_ij‖ − 1/(m(m−1)) Σ_{j<j'} ‖s_ij − s_ij'‖]`
/// where `s_ij` is row `i * m + j` of `samples`. Zero-norm pairs contribute
/// a zero subgradient.
pub fn energy_terms(targets: &DenseMatrix, samples: &DenseMatrix, m: usize) -> Result<EnergyTerms> {
    if m < 2 {
        return Err(CirrlError::InvalidConfig(format!("energy score needs m >= 2, got {m}")));
    }
    let (n, p) = targets.shape();
    if samples.shape() != (n * m, p) {
        return Err(CirrlError::Shape(format!(
            "samples {:?} do not match {n} targets × {m} draws of width {p}",
            samples.shape()
        )));
    }
    let inv_n = 1.0 / n as f64;
    let w_fit = inv_n / m as f64;
    let w_pair = inv_n / (m * (m - 1)) as f64;
    let mut value = 0.0;
    let mut d_t = DenseMatrix::zeros(n, p);
    let mut d_s = DenseMatrix::zeros(n * m, p);
    let mut diff = vec![0.0; p];
    for i in 0..n {
        let t = targets.row(i);
        for j in 0..m {
            let r = i * m + j;
            let norm = diff_norm(samples.row(r), t, &mut diff);
            value += w_fit * norm;
            if norm > 0.0 {
                let c = w_fit / norm;
                for (g, v) in d_s.row_mut(r).iter_mut().zip(&diff) {
                    *g += c * v;
                }
                for (g, v) in d_t.row_mut(i).iter_mut().zip(&diff) {
                    *g -= c * v;
                }
            }
        }
        for j in 0..m {
            for jj in (j + 1)..m {
                let (ra, rb) = (i * m + j, i * m + jj);
                let norm = diff_norm(samples.row(ra), samples.row(rb), &mut diff);
                value -= w_pair * norm;
                if norm > 0.0 {
                    let c = w_pair / norm;
                    for (g, v) in d_s.row_mut(ra).iter_mut().zip(&diff) {
                        *g -= c * v;
                    }
                    for (g, v) in d_s.row_mut(rb).iter_mut().zip(&diff) {
                        *g += c * v;
                    }
                }
            }
        }
    }
    Ok(EnergyTerms {
        value,
        d_targets: d_t,
        d_samples: d_s,
    })
}

fn diff_norm(a: &[f64], b: &[f64], out: &mut [f64]) -> f64 {
    let mut s = 0.0;
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x - y;
        s += *o * *o;
    }
    s.sqrt()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Two-sample energy distance `2E‖a−b‖ − E‖a−a'‖ − E‖b−b'‖` (within-sample
/// terms as U-statistics). Quadratic in the sample sizes.
pub fn energy_distance(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.cols() != b.cols() || a.rows() < 2 || b.rows() < 2 {
        return Err(CirrlError::Shape("energy distance needs two samples of equal width, n >= 2".into()));
    }
    let cross = mean_pairwise(a, b, false);
    Ok(2.0 * cross - mean_pairwise(a, a, true) - mean_pairwise(b, b, true))
}

fn mean_pairwise(a: &DenseMatrix, b: &DenseMatrix, same: bool) -> f64 {
    use rayon::prelude::*;
    let rows: Vec<f64> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let start = if same { i + 1 } else { 0 };
            (start..b.rows()).map(|j| euclid(a.row(i), b.row(j))).sum::<f64>()
        })
        .collect();
    let total: f64 = rows.iter().sum();
    let pairs = if same {
        a.rows() * (a.rows() - 1) / 2
    } else {
        a.rows() * b.rows()
    };
    total / pairs as f64
}

/// Shape of the prior network's scale output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorScale {
    /// `g(e, ξ) = μ(e) + ξ ⊙ exp(ℓ(e))`; output `[μ, ℓ]`, width `2k`.
    Diagonal,
    /// `g(e, ξ) = μ(e) + L(e) ξ` with `L` lower triangular and
    /// `L_ii = exp(ℓ_i)`; output `[μ, ℓ, L_10, L_20, L_21, ...]`,
    /// width `k + k(k+1)/2`.
    #[default]
    LowerTriangular,
}

impl PriorScale {
    pub fn output_width(self, k: usize) -> usize {
        match self {
            PriorScale::Diagonal => 2 * k,
            PriorScale::LowerTriangular => k + k * (k + 1) / 2,
        }
    }

    /// Kind implied by a prior network's output width (the two agree at k = 1).
    pub fn from_output_width(k: usize, width: usize) -> Result<Self> {
        if width == 2 * k {
            Ok(PriorScale::Diagonal)
        } else if width == PriorScale::LowerTriangular.output_width(k) {
            Ok(PriorScale::LowerTriangular)
        } else {
            Err(CirrlError::Shape(format!(
                "prior output width {width} fits no scale layout for latent dim {k}"
            )))
        }
    }
}

/// Column of `L_ij` (`i > j`) in the prior output.
fn offdiag_column(k: usize, i: usize, j: usize) -> usize {
    2 * k + i * (i - 1) / 2 + j
}

/// Gaussian law `N(mean, chol chol^T)` produced by the prior for one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorLaw {
    pub mean: Vec<f64>,
    pub chol: DenseMatrix,
}

impl PriorLaw {
    fn from_output(row: &[f64], k: usize, kind: PriorScale) -> Self {
        let chol = DenseMatrix::from_fn(k, k, |i, j| match (i.cmp(&j), kind) {
            (std::cmp::Ordering::Equal, _) => row[k + i].exp(),
            (std::cmp::Ordering::Greater, PriorScale::LowerTriangular) => row[offdiag_column(k, i, j)],
            _ => 0.0,
        });
        Self {
            mean: row[..k].to_vec(),
            chol,
        }
    }

    pub fn cov(&self) -> DenseMatrix {
        self.chol.matmul_t(&self.chol).expect("square")
    }

    fn sample_into(&self, xi: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.mean[i] + (0..=i).map(|j| self.chol.get(i, j) * xi[j]).sum::<f64>();
        }
    }
}

/// Per-environment prior laws, in environment-position order.
pub fn prior_laws(prior: &Mlp, latent_dim: usize) -> Result<Vec<PriorLaw>> {
    let kind = PriorScale::from_output_width(latent_dim, prior.output_width())?;
    let out = prior.forward_eval(&DenseMatrix::identity(prior.input_width()))?;
    Ok((0..out.rows()).map(|e| PriorLaw::from_output(out.row(e), latent_dim, kind)).collect())
}

/// The three networks trained by the representation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyNets {
    /// `d -> k`.
    pub enc: Mlp,
    /// `k + q -> d`, noise concatenated after the latent code.
    pub dec: Mlp,
    /// `|E| -> ` mean and scale parameters (see [`PriorScale`]).
    pub prior: Mlp,
}

impl EnergyNets {
    pub fn latent_dim(&self) -> usize {
        self.enc.output_width()
    }

    pub fn dec_noise_dim(&self) -> usize {
        self.dec.input_width() - self.latent_dim()
    }

    pub fn num_envs(&self) -> usize {
        self.prior.input_width()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.latent_dim();
        if self.dec.input_width() <= k || self.dec.output_width() != self.enc.input_width() {
            return Err(CirrlError::Shape(format!(
                "decoder {}→{} does not invert encoder {}→{k}",
                self.dec.input_width(),
                self.dec.output_width(),
                self.enc.input_width()
            )));
        }
        PriorScale::from_output_width(k, self.prior.output_width())?;
        Ok(())
    }
}

/// Loss components of one evaluation. `total = dpa + alpha * prior`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub dpa: f64,
    pub prior: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlGrads {
    pub enc: MlpGrads,
    pub dec: MlpGrads,
    pub prior: MlpGrads,
}

/// Everything a training step needs from one pass: values, gradients, and
/// the forward caches for folding batch-norm statistics.
#[derive(Debug)]
pub struct RlPass {
    pub parts: LossParts,
    pub grads: RlGrads,
    pub enc_cache: ForwardCache,
    pub dec_cache: ForwardCache,
}

struct Core {
    dpa: f64,
    prior: f64,
    enc: (MlpGrads, ForwardCache),
    dec: Option<(MlpGrads, ForwardCache)>,
    prior_grads: Option<MlpGrads>,
}

fn core<R: Rng + ?Sized>(
    enc: &Mlp,
    dec: Option<&Mlp>,
    prior: Option<&Mlp>,
    batch: &EnergyBatch,
    alpha: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Core> {
    batch.validate()?;
    if !(alpha >= 0.0) {
        return Err(CirrlError::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
    }
    let n = batch.n();
    let m = batch.m;
    let (z, enc_cache) = enc.forward(&batch.x, mode, rng)?;
    let k = z.cols();
    let mut dz = DenseMatrix::zeros(n, k);

    let mut dpa = 0.0;
    let mut dec_out = None;
    if let Some(dec) = dec {
        let q = batch.dec_noise.cols();
        if dec.input_width() != k + q {
            return Err(CirrlError::Shape(format!(
                "decoder input {} != latent {k} + noise {q}",
                dec.input_width()
            )));
        }
        let input = DenseMatrix::from_fn(n * m, k + q, |r, c| {
            if c < k {
                z.get(r / m, c)
            } else {
                batch.dec_noise.get(r, c - k)
            }
        });
        let (xhat, dec_cache) = dec.forward(&input, mode, rng)?;
        let terms = energy_terms(&batch.x, &xhat, m)?;
        dpa = terms.value;
        let (dec_grads, d_input) = dec.backward(&dec_cache, &terms.d_samples)?;
        for r in 0..n * m {
            let src = &d_input.row(r)[..k];
            for (g, v) in dz.row_mut(r / m).iter_mut().zip(src) {
                *g += v;
            }
        }
        dec_out = Some((dec_grads, dec_cache));
    }

    let mut prior_value = 0.0;
    let mut prior_grads = None;
    if let Some(g) = prior {
        if g.input_width() != batch.num_envs {
            return Err(CirrlError::Shape(format!(
                "prior network takes {} envs, batch has {}",
                g.input_width(),
                batch.num_envs
            )));
        }
        let kind = PriorScale::from_output_width(k, g.output_width())?;
        if batch.prior_noise.cols() != k {
            return Err(CirrlError::Shape(format!(
                "prior noise width {} != latent {k}",
                batch.prior_noise.cols()
            )));
        }
        let (out, g_cache) = g.forward(&DenseMatrix::identity(batch.num_envs), mode, rng)?;
        let laws: Vec<PriorLaw> = (0..batch.num_envs).map(|e| PriorLaw::from_output(out.row(e), k, kind)).collect();
        let mut samples = DenseMatrix::zeros(n * m, k);
        for r in 0..n * m {
            laws[batch.env[r / m]].sample_into(batch.prior_noise.row(r), samples.row_mut(r));
        }
        let terms = energy_terms(&z, &samples, m)?;
        prior_value = terms.value;
        let mut d_out = DenseMatrix::zeros(batch.num_envs, out.cols());
        for r in 0..n * m {
            let e = batch.env[r / m];
            let xi = batch.prior_noise.row(r);
            let ds = terms.d_samples.row(r);
            let row = d_out.row_mut(e);
            for i in 0..k {
                let g_i = alpha * ds[i];
                row[i] += g_i;
                row[k + i] += g_i * xi[i] * laws[e].chol.get(i, i);
                if kind == PriorScale::LowerTriangular {
                    for j in 0..i {
                        row[offdiag_column(k, i, j)] += g_i * xi[j];
                    }
                }
            }
        }
        dz.axpy(alpha, &terms.d_targets);
        prior_grads = Some(g.backward(&g_cache, &d_out)?.0);
    }

    let (enc_grads, _) = enc.backward(&enc_cache, &dz)?;
    Ok(Core {
        dpa,
        prior: prior_value,
        enc: (enc_grads, enc_cache),
        dec: dec_out,
        prior_grads,
    })
}

/// Distributional-autoencoder energy loss with gradients for `(enc, dec)`.
pub fn loss_dpa<R: Rng + ?Sized>(
    enc: &Mlp,
    dec: &Mlp,
    batch: &EnergyBatch,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, MlpGrads, MlpGrads)> {
    let c = core(enc, Some(dec), None, batch, 0.0, mode, rng)?;
    Ok((c.dpa, c.enc.0, c.dec.expect("decoder present").0))
}

/// Conditional energy loss of the encoder output against the prior network,
/// with gradients for `(enc, prior)`.
pub fn loss_prior<R: Rng + ?Sized>(
    enc: &Mlp,
    prior: &Mlp,
    batch: &EnergyBatch,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, MlpGrads, MlpGrads)> {
    let c = core(enc, None, Some(prior), batch, 1.0, mode, rng)?;
    Ok((c.prior, c.enc.0, c.prior_grads.expect("prior present")))
}

/// `L_DPA + alpha · L_G` with gradients and forward caches.
pub fn loss_rl_pass<R: Rng + ?Sized>(
    nets: &EnergyNets,
    batch: &EnergyBatch,
    alpha: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<RlPass> {
    let c = core(&nets.enc, Some(&nets.dec), Some(&nets.prior), batch, alpha, mode, rng)?;
    let (dec_grads, dec_cache) = c.dec.expect("decoder present");
    Ok(RlPass {
        parts: LossParts {
            dpa: c.dpa,
            prior: c.prior,
            total: c.dpa + alpha * c.prior,
        },
        grads: RlGrads {
            enc: c.enc.0,
            dec: dec_grads,
            prior: c.prior_grads.expect("prior present"),
        },
        enc_cache: c.enc.1,
        dec_cache,
    })
}

pub fn loss_rl<R: Rng + ?Sized>(
    nets: &EnergyNets,
    batch: &EnergyBatch,
    alpha: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(LossParts, RlGrads)> {
    let pass = loss_rl_pass(nets, batch, alpha, mode, rng)?;
    Ok((pass.parts, pass.grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::rng::rng_from_seed;
    use crate::tensor_nn::{Activation, MlpConfig};
    use proptest::prelude::*;

    fn identity_net(width: usize) -> Mlp {
        let mut net = Mlp::new(MlpConfig::new(vec![width, width]).with_activation(Activation::Identity)).unwrap();
        net.layers_mut()[0].weight = DenseMatrix::identity(width);
        net
    }

    /// Linear net ignoring every input column but the noise block.
    fn noise_passthrough(k: usize, q: usize) -> Mlp {
        let mut net = Mlp::new(MlpConfig::new(vec![k + q, q])).unwrap();
        net.layers_mut()[0].weight = DenseMatrix::from_fn(q, k + q, |r, c| if c == k + r { 1.0 } else { 0.0 });
        net.layers_mut()[0].bias = vec![0.0; q];
        net
    }

    fn small_nets(d: usize, k: usize, envs: usize, seed: u64) -> EnergyNets {
        EnergyNets {
            enc: Mlp::new(MlpConfig::stack(d, 6, 2, k).with_batch_norm(true).with_seed(seed)).unwrap(),
            dec: Mlp::new(MlpConfig::stack(k + d, 6, 2, d).with_batch_norm(true).with_seed(seed + 1)).unwrap(),
            prior: Mlp::new(MlpConfig::stack(envs, 5, 2, 2 * k).with_seed(seed + 2)).unwrap(),
        }
    }

    fn small_batch(n: usize, d: usize, k: usize, envs: usize, m: usize, seed: u64) -> EnergyBatch {
        let mut rng = rng_from_seed(seed);
        let x = DenseMatrix::new(n, d, normal_vec(&mut rng, n * d)).unwrap();
        let env = (0..n).map(|i| i % envs).collect();
        EnergyBatch::sample(x, env, envs, m, d, k, &mut rng).unwrap()
    }

    #[test]
    fn m_below_two_is_a_config_error() {
        let x = DenseMatrix::zeros(3, 2);
        let err = EnergyBatch::sample(x, vec![0; 3], 1, 1, 2, 1, &mut rng_from_seed(0)).unwrap_err();
        assert!(matches!(err, CirrlError::InvalidConfig(_)));
        assert!(energy_terms(&DenseMatrix::zeros(1, 1), &DenseMatrix::zeros(1, 1), 1).is_err());
    }

    #[test]
    fn unknown_environment_is_a_data_error() {
        let mut b = small_batch(4, 2, 1, 2, 2, 0);
        b.env[1] = 5;
        let nets = small_nets(2, 1, 2, 0);
        let err = loss_prior(&nets.enc, &nets.prior, &b, Mode::Eval, &mut rng_from_seed(0)).unwrap_err();
        assert!(matches!(err, CirrlError::Data(_)));
    }

    #[test]
    fn perfect_noiseless_reconstruction_scores_zero() {
        let enc = identity_net(3);
        let mut dec = Mlp::new(MlpConfig::new(vec![6, 3])).unwrap();
        dec.layers_mut()[0].weight = DenseMatrix::from_fn(3, 6, |r, c| if r == c { 1.0 } else { 0.0 });
        dec.layers_mut()[0].bias = vec![0.0; 3];
        let b = small_batch(20, 3, 3, 1, 3, 1);
        let (v, _, _) = loss_dpa(&enc, &dec, &b, Mode::Eval, &mut rng_from_seed(0)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn constant_decoder_scores_mean_distance() {
        let enc = identity_net(2);
        let mut dec = Mlp::new(MlpConfig::new(vec![4, 2])).unwrap();
        dec.layers_mut()[0].weight = DenseMatrix::zeros(2, 4);
        dec.layers_mut()[0].bias = vec![0.5, -1.0];
        let b = small_batch(30, 2, 2, 1, 2, 2);
        let (v, _, _) = loss_dpa(&enc, &dec, &b, Mode::Eval, &mut rng_from_seed(0)).unwrap();
        let expect: f64 = (0..30).map(|i| euclid(b.x.row(i), &[0.5, -1.0])).sum::<f64>() / 30.0;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn gaussian_noise_decoder_matches_closed_form() {
        // x ~ N(0,1), x̂ = ε̃: E|x − ε̃| − ½E|ε̃ − ε̃'| = 2/√π − 1/√π
        let n = 500_000;
        let mut rng = rng_from_seed(3);
        let x = DenseMatrix::new(n, 1, normal_vec(&mut rng, n)).unwrap();
        let b = EnergyBatch::sample(x, vec![0; n], 1, 2, 1, 1, &mut rng).unwrap();
        let (v, _, _) = loss_dpa(&identity_net(1), &noise_passthrough(1, 1), &b, Mode::Eval, &mut rng).unwrap();
        let expect = 1.0 / std::f64::consts::PI.sqrt();
        assert!((v - expect).abs() / expect < 0.02, "{v} vs {expect}");
    }

    #[test]
    fn standard_normal_prior_against_zero_code_matches_closed_form() {
        // enc(x) = 0, g(e, ξ) = ξ: E|ξ| − ½E|ξ − ξ'| = √(2/π) − 1/√π
        let n = 500_000;
        let mut rng = rng_from_seed(4);
        let x = DenseMatrix::zeros(n, 1);
        let b = EnergyBatch::sample(x, vec![0; n], 1, 2, 1, 1, &mut rng).unwrap();
        let mut g = Mlp::new(MlpConfig::new(vec![1, 2])).unwrap();
        g.layers_mut()[0].weight = DenseMatrix::zeros(2, 1);
        g.layers_mut()[0].bias = vec![0.0, 0.0];
        let (v, _, _) = loss_prior(&identity_net(1), &g, &b, Mode::Eval, &mut rng).unwrap();
        let pi = std::f64::consts::PI;
        let expect = (2.0 / pi).sqrt() - 1.0 / pi.sqrt();
        assert!((v - expect).abs() / expect < 0.02, "{v} vs {expect}");
    }

    #[test]
    fn degenerate_prior_at_the_code_scores_zero() {
        let b = small_batch(12, 2, 2, 3, 2, 5);
        let mut g = Mlp::new(MlpConfig::new(vec![3, 4])).unwrap();
        g.layers_mut()[0].weight = DenseMatrix::zeros(4, 3);
        g.layers_mut()[0].bias = vec![0.0, 0.0, -800.0, -800.0];
        let x = DenseMatrix::zeros(12, 2);
        let b = EnergyBatch { x, ..b };
        let (v, _, _) = loss_prior(&identity_net(2), &g, &b, Mode::Eval, &mut rng_from_seed(0)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn swapping_prior_draws_leaves_estimate_unchanged() {
        let nets = small_nets(3, 2, 2, 7);
        let b = small_batch(10, 3, 2, 2, 2, 8);
        let mut swapped = b.clone();
        for i in 0..10 {
            let (a, c) = (b.prior_noise.row(2 * i).to_vec(), b.prior_noise.row(2 * i + 1).to_vec());
            swapped.prior_noise.row_mut(2 * i).copy_from_slice(&c);
            swapped.prior_noise.row_mut(2 * i + 1).copy_from_slice(&a);
        }
        let mut rng = rng_from_seed(0);
        let (v1, _, _) = loss_prior(&nets.enc, &nets.prior, &b, Mode::Eval, &mut rng).unwrap();
        let (v2, _, _) = loss_prior(&nets.enc, &nets.prior, &swapped, Mode::Eval, &mut rng).unwrap();
        assert!((v1 - v2).abs() < 1e-14);
    }

    #[test]
    fn alpha_zero_is_dpa_and_alpha_one_is_the_sum() {
        let nets = small_nets(3, 2, 2, 9);
        let b = small_batch(16, 3, 2, 2, 2, 10);
        let mut rng = rng_from_seed(0);
        let (dpa, _, _) = loss_dpa(&nets.enc, &nets.dec, &b, Mode::Eval, &mut rng).unwrap();
        let (pr, _, _) = loss_prior(&nets.enc, &nets.prior, &b, Mode::Eval, &mut rng).unwrap();
        let (p0, _) = loss_rl(&nets, &b, 0.0, Mode::Eval, &mut rng).unwrap();
        assert_eq!(p0.total, dpa);
        let (p1, _) = loss_rl(&nets, &b, 1.0, Mode::Eval, &mut rng).unwrap();
        assert_eq!(p1.total, dpa + pr);
    }

    #[test]
    fn estimate_is_invariant_to_item_permutation() {
        let nets = small_nets(3, 2, 3, 11);
        let b = small_batch(9, 3, 2, 3, 3, 12);
        let perm = [4, 0, 8, 2, 7, 1, 3, 6, 5];
        let mut rng = rng_from_seed(0);
        let (a, _) = loss_rl(&nets, &b, 0.3, Mode::Eval, &mut rng).unwrap();
        let (c, _) = loss_rl(&nets, &b.permuted(&perm), 0.3, Mode::Eval, &mut rng).unwrap();
        assert!((a.total - c.total).abs() < 1e-13);
    }

    #[test]
    fn dpa_is_invariant_to_joint_rotation() {
        let d = 3;
        let mut rng = rng_from_seed(13);
        let q = nalgebra::DMatrix::from_vec(d, d, normal_vec(&mut rng, d * d)).qr().q();
        let q = DenseMatrix::from_nalgebra(&q);
        let x = DenseMatrix::new(50, d, normal_vec(&mut rng, 150)).unwrap();
        let samples = DenseMatrix::new(100, d, normal_vec(&mut rng, 300)).unwrap();
        let a = energy_terms(&x, &samples, 2).unwrap().value;
        let b = energy_terms(&x.matmul_t(&q).unwrap(), &samples.matmul_t(&q).unwrap(), 2).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn energy_terms_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(14);
        let t = DenseMatrix::new(4, 3, normal_vec(&mut rng, 12)).unwrap();
        let s = DenseMatrix::new(12, 3, normal_vec(&mut rng, 36)).unwrap();
        let terms = energy_terms(&t, &s, 3).unwrap();
        for idx in 0..12 {
            let num = central_difference(1e-5, |h| {
                let mut tp = t.clone();
                tp.as_mut_slice()[idx] += h;
                energy_terms(&tp, &s, 3).unwrap().value
            });
            assert!(relative_error(terms.d_targets.as_slice()[idx], num) < 1e-6);
        }
        for idx in 0..36 {
            let num = central_difference(1e-5, |h| {
                let mut sp = s.clone();
                sp.as_mut_slice()[idx] += h;
                energy_terms(&t, &sp, 3).unwrap().value
            });
            assert!(relative_error(terms.d_samples.as_slice()[idx], num) < 1e-6);
        }
    }

    #[test]
    fn rl_gradients_match_finite_differences_for_all_networks() {
        use crate::gradcheck::{max_param_error, sample_param_slots};
        let nets = small_nets(3, 2, 3, 16);
        let b = small_batch(12, 3, 2, 3, 2, 17);
        let alpha = 0.7;
        let value = |n: &EnergyNets| loss_rl(n, &b, alpha, Mode::Train, &mut rng_from_seed(0)).unwrap().0.total;
        let (_, grads) = loss_rl(&nets, &b, alpha, Mode::Train, &mut rng_from_seed(0)).unwrap();
        let h = 1e-5;
        let e_enc = max_param_error(&nets.enc, &grads.enc, &sample_param_slots(&nets.enc, 15, 1), h, |m| {
            value(&EnergyNets { enc: m.clone(), ..nets.clone() })
        });
        let e_dec = max_param_error(&nets.dec, &grads.dec, &sample_param_slots(&nets.dec, 15, 2), h, |m| {
            value(&EnergyNets { dec: m.clone(), ..nets.clone() })
        });
        let e_g = max_param_error(&nets.prior, &grads.prior, &sample_param_slots(&nets.prior, 15, 3), h, |m| {
            value(&EnergyNets { prior: m.clone(), ..nets.clone() })
        });
        assert!(e_enc <= 1e-4 && e_dec <= 1e-4 && e_g <= 1e-4, "{e_enc} {e_dec} {e_g}");
    }

    #[test]
    fn triangular_prior_gradients_match_finite_differences() {
        use crate::gradcheck::{max_param_error, sample_param_slots};
        let k = 3;
        let mut nets = small_nets(4, k, 2, 18);
        let width = PriorScale::LowerTriangular.output_width(k);
        nets.prior = Mlp::new(MlpConfig::stack(2, 5, 2, width).with_seed(19)).unwrap();
        let b = small_batch(10, 4, k, 2, 3, 20);
        let value = |n: &EnergyNets| loss_rl(n, &b, 0.5, Mode::Train, &mut rng_from_seed(0)).unwrap().0.total;
        let (_, grads) = loss_rl(&nets, &b, 0.5, Mode::Train, &mut rng_from_seed(0)).unwrap();
        // every output column of the last layer: mean, log-diagonal and off-diagonal
        let last = nets.prior.parameters().len() - 1;
        let mut slots: Vec<_> = (0..width).map(|c| (last, c)).collect();
        slots.extend(sample_param_slots(&nets.prior, 15, 4));
        let e_g = max_param_error(&nets.prior, &grads.prior, &slots, 1e-5, |m| {
            value(&EnergyNets { prior: m.clone(), ..nets.clone() })
        });
        let e_enc = max_param_error(&nets.enc, &grads.enc, &sample_param_slots(&nets.enc, 15, 5), 1e-5, |m| {
            value(&EnergyNets { enc: m.clone(), ..nets.clone() })
        });
        assert!(e_g <= 1e-4 && e_enc <= 1e-4, "{e_g} {e_enc}");
    }

    #[test]
    fn prior_law_layouts() {
        assert_eq!(PriorScale::from_output_width(2, 4).unwrap(), PriorScale::Diagonal);
        assert_eq!(PriorScale::from_output_width(2, 5).unwrap(), PriorScale::LowerTriangular);
        assert!(PriorScale::from_output_width(2, 6).is_err());
        let row = [1.0, 2.0, 0.0, (2.0f64).ln(), 0.5];
        let law = PriorLaw::from_output(&row, 2, PriorScale::LowerTriangular);
        assert_eq!(law.mean, vec![1.0, 2.0]);
        assert_eq!(law.chol.as_slice(), &[1.0, 0.0, 0.5, 2.0]);
        let mut s = [0.0; 2];
        law.sample_into(&[1.0, 1.0], &mut s);
        assert_eq!(s, [2.0, 4.5]);
    }

    #[test]
    fn energy_distance_separates_shifted_samples() {
        let mut rng = rng_from_seed(15);
        let a = DenseMatrix::new(800, 2, normal_vec(&mut rng, 1600)).unwrap();
        let b = DenseMatrix::new(800, 2, normal_vec(&mut rng, 1600)).unwrap();
        let c = b.map(|v| v + 1.0);
        assert!(energy_distance(&a, &b).unwrap().abs() < 0.02);
        assert!(energy_distance(&a, &c).unwrap() > 0.3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn any_item_permutation_leaves_loss_unchanged(
            seed in 0u64..10_000,
            alpha in 0.0f64..1.0,
            perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let nets = small_nets(3, 2, 3, seed);
            let b = small_batch(12, 3, 2, 3, 2, seed + 100);
            let mut rng = rng_from_seed(0);
            let (a, _) = loss_rl(&nets, &b, alpha, Mode::Eval, &mut rng).unwrap();
            let (c, _) = loss_rl(&nets, &b.permuted(&perm), alpha, Mode::Eval, &mut rng).unwrap();
            prop_assert!((a.total - c.total).abs() <= 1e-12 * (1.0 + a.total.abs()));
        }

        #[test]
        fn energy_terms_are_rotation_invariant(seed in 0u64..10_000, d in 1usize..5) {
            let mut rng = rng_from_seed(seed);
            let q = nalgebra::DMatrix::from_vec(d, d, normal_vec(&mut rng, d * d)).qr().q();
            let q = DenseMatrix::from_nalgebra(&q);
            let x = DenseMatrix::new(20, d, normal_vec(&mut rng, 20 * d)).unwrap();
            let samples = DenseMatrix::new(40, d, normal_vec(&mut rng, 40 * d)).unwrap();
            let a = energy_terms(&x, &samples, 2).unwrap().value;
            let b = energy_terms(&x.matmul_t(&q).unwrap(), &samples.matmul_t(&q).unwrap(), 2).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
