use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution};
use serde::{Deserialize, Serialize};

use super::dataset::{EnvData, InterventionMoments, MultiEnvDataset};
use super::decoder::{make_decoder, DecoderFn, DecoderSpec};
use super::graph::{psd_norm1, sample_dag, xi_eta, EnvIntervention};
use crate::error::{CirrlError, Result};
use crate::linalg::{psd_sqrt, sym_eigen, symmetrize};
use crate::rng::{derive_seed, normal_vec, rng_from_seed};
use crate::tensor_nn::DenseMatrix;

/// Distribution family of the test-time shock `ε + v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NoiseFamily {
    Gaussian,
    StudentT { nu: f64 },
    /// Misspecified: independent recentered and rescaled χ² components.
    Chi2,
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseFamily::Gaussian => write!(f, "gaussian"),
            NoiseFamily::StudentT { nu } => write!(f, "student_t:{nu}"),
            NoiseFamily::Chi2 => write!(f, "chi2"),
        }
    }
}

impl FromStr for NoiseFamily {
    type Err = CirrlError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "gaussian" => Ok(NoiseFamily::Gaussian),
            "chi2" => Ok(NoiseFamily::Chi2),
            _ => {
                let nu = s
                    .strip_prefix("student_t:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| CirrlError::InvalidConfig(format!("unknown noise family '{s}'")))?;
                if !(nu >= 1.0) {
                    return Err(CirrlError::InvalidConfig(format!("student_t needs nu >= 1, got {nu}")));
                }
                Ok(NoiseFamily::StudentT { nu })
            }
        }
    }
}

impl TryFrom<String> for NoiseFamily {
    type Error = CirrlError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NoiseFamily> for String {
    fn from(f: NoiseFamily) -> String {
        f.to_string()
    }
}

/// Default test-intervention mean when none is given:
/// `scale(η) / |E| · Σ_e μ_e`, with `scale = √η` or `η`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanShiftRule {
    /// Keeps `Ξ_η − μ_v μ_v^T` PSD for every η (Cauchy–Schwarz).
    #[default]
    Sqrt,
    /// Linear in η; infeasible for strong perturbations.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub k: usize,
    pub d: usize,
    /// Total environments, the observational one included.
    pub num_envs: usize,
    pub n_per_env: usize,
    pub decoder: DecoderSpec,
    pub eta: f64,
    pub noise_family: NoiseFamily,
    pub mu_v: Option<Vec<f64>>,
    pub mean_rule: MeanShiftRule,
    pub exclude_y: bool,
    pub enforce_assumption1: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            k: 2,
            d: 10,
            num_envs: 5,
            n_per_env: 2000,
            decoder: DecoderSpec::default(),
            eta: 10.0,
            noise_family: NoiseFamily::Gaussian,
            mu_v: None,
            mean_rule: MeanShiftRule::Sqrt,
            exclude_y: false,
            enforce_assumption1: false,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CirrlError::InvalidConfig(m));
        if self.k == 0 {
            return bad("latent dimension k must be >= 1".into());
        }
        if self.d < self.k || self.d < 2 {
            return bad(format!("need d >= k and d >= 2, got k={}, d={}", self.k, self.d));
        }
        if self.num_envs == 0 {
            return bad("need at least the observational environment".into());
        }
        if self.n_per_env < 2 {
            return bad("need at least two samples per environment".into());
        }
        if !(self.eta >= 0.0) {
            return bad(format!("eta must be >= 0, got {}", self.eta));
        }
        if let NoiseFamily::StudentT { nu } = self.noise_family {
            if !(nu >= 1.0) {
                return bad(format!("student_t needs nu >= 1, got {nu}"));
            }
        }
        if let Some(mu) = &self.mu_v {
            if mu.len() != self.k + 1 {
                return bad(format!("mu_v has length {}, expected {}", mu.len(), self.k + 1));
            }
        }
        Ok(())
    }
}

/// Ground-truth linear SCM over `(Z, Y)` plus the decoder `Z -> X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmSystem {
    pub k: usize,
    pub d: usize,
    pub adjacency: DenseMatrix,
    pub total_effect: DenseMatrix,
    pub decoder: DecoderFn,
    pub eps_cov: DenseMatrix,
    /// Laws of δ^e for environments `1..`, in label order.
    pub interventions: Vec<EnvIntervention>,
    pub exclude_y: bool,
}

impl ScmSystem {
    pub fn b(&self) -> DMatrix<f64> {
        self.adjacency.to_nalgebra()
    }

    pub fn c(&self) -> DMatrix<f64> {
        self.total_effect.to_nalgebra()
    }

    /// Rows of `C` producing the latents, `k × (k+1)`.
    pub fn latent_map(&self) -> DMatrix<f64> {
        self.c().rows(0, self.k).into_owned()
    }

    /// Row of `C` producing the response.
    pub fn response_map(&self) -> DVector<f64> {
        self.c().row(self.k).transpose()
    }

    pub fn eps(&self) -> DMatrix<f64> {
        self.eps_cov.to_nalgebra()
    }

    /// Intervention moments per environment label (label 0 is zero).
    pub fn env_moments(&self) -> Vec<InterventionMoments> {
        let dim = self.k + 1;
        std::iter::once(InterventionMoments::zero(dim))
            .chain(self.interventions.iter().map(|iv| InterventionMoments {
                mean: iv.mu.clone(),
                cov: iv.sigma.clone(),
            }))
            .collect()
    }

    /// Residuals of the node equations `(I - B)(Z, Y) - shock`, max abs.
    pub fn node_equation_residual(&self, z: &DenseMatrix, y: &[f64], shocks: &DenseMatrix) -> f64 {
        let n = y.len();
        let dim = self.k + 1;
        let full = DMatrix::from_fn(n, dim, |i, j| if j < self.k { z.get(i, j) } else { y[i] });
        let i_minus_b = DMatrix::identity(dim, dim) - self.b();
        let lhs = full * i_minus_b.transpose();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..dim {
                worst = worst.max((lhs[(i, j)] - shocks.get(i, j)).abs());
            }
        }
        worst
    }

    fn propagate(&self, shocks: &DMatrix<f64>) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
        let full = shocks * self.c().transpose();
        let n = full.nrows();
        let z = DenseMatrix::from_fn(n, self.k, |i, j| full[(i, j)]);
        let y = (0..n).map(|i| full[(i, self.k)]).collect();
        let x = self.decoder.decode(&z)?;
        Ok((x, y, z))
    }
}

fn sample_gaussian_rows<R: Rng + ?Sized>(n: usize, mean: &DVector<f64>, sqrt_cov: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    let dim = mean.len();
    let white = DMatrix::from_row_slice(n, dim, &normal_vec(rng, n * dim));
    let mut out = white * sqrt_cov.transpose();
    for mut row in out.row_iter_mut() {
        row += mean.transpose();
    }
    out
}

/// Draws the SCM and all training environments. Environment 0 is
/// observational; environment `e >= 1` adds `δ^e ~ N(μ_e, Σ_e)`.
pub fn generate_train(cfg: &GenConfig) -> Result<(ScmSystem, MultiEnvDataset)> {
    cfg.validate()?;
    let dim = cfg.k + 1;
    let dag = sample_dag(cfg.k, &mut rng_from_seed(derive_seed(cfg.seed, 1)));
    let eps_cov = psd_norm1(dim, &mut rng_from_seed(derive_seed(cfg.seed, 2)));
    let mut iv_rng = rng_from_seed(derive_seed(cfg.seed, 3));
    let interventions: Vec<EnvIntervention> = (1..cfg.num_envs)
        .map(|_| EnvIntervention::sample(dim, cfg.exclude_y, &mut iv_rng))
        .collect();
    let decoder = make_decoder(&cfg.decoder, cfg.k, cfg.d, derive_seed(cfg.seed, 4))?;
    let sys = ScmSystem {
        k: cfg.k,
        d: cfg.d,
        adjacency: DenseMatrix::from_nalgebra(&dag.adjacency),
        total_effect: DenseMatrix::from_nalgebra(&dag.total_effect),
        decoder,
        eps_cov: DenseMatrix::from_nalgebra(&eps_cov),
        interventions,
        exclude_y: cfg.exclude_y,
    };

    let eps_sqrt = psd_sqrt(&eps_cov);
    let zero = DVector::zeros(dim);
    let mut envs = Vec::with_capacity(cfg.num_envs);
    for (label, moments) in sys.env_moments().into_iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, 100 + label as u64));
        let eps = sample_gaussian_rows(cfg.n_per_env, &zero, &eps_sqrt, &mut rng);
        let shocks = if label == 0 {
            eps
        } else {
            let mean = DVector::from_column_slice(&moments.mean);
            let delta = sample_gaussian_rows(cfg.n_per_env, &mean, &psd_sqrt(&moments.cov.to_nalgebra()), &mut rng);
            eps + delta
        };
        let (x, y, z) = sys.propagate(&shocks)?;
        envs.push(EnvData {
            label,
            x,
            y,
            z_true: Some(z),
            shocks: Some(DenseMatrix::from_nalgebra(&shocks)),
            moments: Some(moments),
        });
    }
    Ok((sys, MultiEnvDataset::new(envs)?))
}

/// One out-of-distribution test environment.
#[derive(Debug, Clone, PartialEq)]
pub struct TestEnv {
    pub eta: f64,
    pub family: NoiseFamily,
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    pub z_true: Option<DenseMatrix>,
    pub shocks: Option<DenseMatrix>,
    /// `E[v]`.
    pub v_mean: Vec<f64>,
    /// `E[v v^T]` of the Gaussian construction (`Ξ_η`).
    pub v_second_moment: DenseMatrix,
    /// Degrees of freedom used by the χ² family.
    pub chi2_dof: Option<u32>,
}

impl TestEnv {
    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// Resolves `μ_v`: explicit, else the configured rule, then optionally
/// projected onto `span(Σ_0 M^T)` with `Σ_0 = Cov[ε] + Ξ_η` and `M` the
/// latent rows of `C`. A mean in that span satisfies `E[v] = Cov[ε + v] M^T α`
/// for the resulting covariance as well.
pub fn test_mean(sys: &ScmSystem, cfg: &GenConfig, xi: &DMatrix<f64>) -> DVector<f64> {
    let dim = sys.k + 1;
    let mut mu = match &cfg.mu_v {
        Some(v) => DVector::from_column_slice(v),
        None => {
            if sys.interventions.is_empty() {
                DVector::zeros(dim)
            } else {
                let scale = match cfg.mean_rule {
                    MeanShiftRule::Sqrt => cfg.eta.sqrt(),
                    MeanShiftRule::Linear => cfg.eta,
                };
                let sum = sys.interventions.iter().fold(DVector::zeros(dim), |acc, iv| acc + iv.mean());
                sum * (scale / sys.interventions.len() as f64)
            }
        }
    };
    if sys.exclude_y {
        mu[dim - 1] = 0.0;
    }
    if cfg.enforce_assumption1 {
        let basis = (sys.eps() + xi) * sys.latent_map().transpose();
        let gram = basis.transpose() * &basis;
        if let Some(inv) = gram.try_inverse() {
            mu = &basis * (inv * (basis.transpose() * &mu));
        }
    }
    mu
}

/// Draws an OOD environment `(Z, Y) = C (ε + v)` with `E[v v^T] = Ξ_η`.
pub fn generate_test(sys: &ScmSystem, cfg: &GenConfig, n: usize) -> Result<TestEnv> {
    cfg.validate()?;
    if sys.interventions.is_empty() && cfg.eta > 0.0 {
        return Err(CirrlError::InvalidConfig("test perturbations need interventional environments".into()));
    }
    let dim = sys.k + 1;
    let xi = if sys.interventions.is_empty() {
        DMatrix::zeros(dim, dim)
    } else {
        xi_eta(&sys.interventions, cfg.eta)
    };
    let mu = test_mean(sys, cfg, &xi);
    let cov = symmetrize(&(&xi - &mu * mu.transpose()));
    let (vals, _) = sym_eigen(&cov);
    let tol = 1e-9 * vals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    match cfg.noise_family {
        NoiseFamily::Chi2 => {
            if let Some(j) = (0..dim).find(|&j| cov[(j, j)] < -tol) {
                return Err(CirrlError::PerturbationTooStrong { eigenvalue: cov[(j, j)] });
            }
        }
        _ => {
            if vals[0] < -tol {
                return Err(CirrlError::PerturbationTooStrong { eigenvalue: vals[0] });
            }
        }
    }

    let mut rng = rng_from_seed(derive_seed(cfg.seed, 7));
    let eps = sample_gaussian_rows(n, &DVector::zeros(dim), &psd_sqrt(&sys.eps()), &mut rng);
    let mut chi2_dof = None;
    let v = match cfg.noise_family {
        NoiseFamily::Gaussian | NoiseFamily::StudentT { .. } => sample_gaussian_rows(n, &mu, &psd_sqrt(&cov), &mut rng),
        NoiseFamily::Chi2 => {
            let dof = mu.iter().map(|v| v.abs()).sum::<f64>().round().max(1.0);
            chi2_dof = Some(dof as u32);
            let chi = ChiSquared::new(dof).expect("dof >= 1");
            let norm = (2.0 * dof).sqrt();
            DMatrix::from_fn(n, dim, |_, j| {
                let u: f64 = chi.sample(&mut rng);
                mu[j] + cov[(j, j)].max(0.0).sqrt() * (u - dof) / norm
            })
        }
    };
    let mut shocks = eps + v;
    if let NoiseFamily::StudentT { nu } = cfg.noise_family {
        let chi = ChiSquared::new(nu).expect("nu >= 1");
        for mut row in shocks.row_iter_mut() {
            let u: f64 = chi.sample(&mut rng);
            let s = (nu / u).sqrt();
            for j in 0..dim {
                row[j] = (row[j] - mu[j]) * s + mu[j];
            }
        }
    }
    let (x, y, z) = sys.propagate(&shocks)?;
    Ok(TestEnv {
        eta: cfg.eta,
        family: cfg.noise_family,
        x,
        y,
        z_true: Some(z),
        shocks: Some(DenseMatrix::from_nalgebra(&shocks)),
        v_mean: mu.as_slice().to_vec(),
        v_second_moment: DenseMatrix::from_nalgebra(&xi),
        chi2_dof,
    })
}
