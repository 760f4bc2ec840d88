//! Worst-case risk evaluation: the plug-in risk over training environments,
//! the uncertainty-set bound `T`, an analytic sup oracle for linear worlds,
//! an elliptical conditional-expectation check, and OOD metrics.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drig::{CirrlModel, DrigHead, Weighting};
use crate::error::{CirrlError, Result};
use crate::linalg::{condition_number, is_symmetric, lstsq_with_intercept, min_eigenvalue, psd_sqrt, solve_checked, symmetrize};
use crate::rng::{normal_vec, rng_from_seed};
use crate::scm_gen::{InterventionMoments, MultiEnvDataset, NoiseFamily, ScmSystem, TestEnv};
use crate::tensor_nn::DenseMatrix;

/// Slack allowed below zero when testing `T − E[vv^T] ⪰ 0`.
pub const MEMBERSHIP_TOL: f64 = 1e-8;

/// Covariates and, when known, true latents for a set of rows.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    pub x: &'a DenseMatrix,
    pub z: Option<&'a DenseMatrix>,
}

/// Anything producing raw-scale predictions of `Y`.
pub trait Predictor {
    fn predict_raw(&self, inputs: Inputs<'_>) -> Result<Vec<f64>>;
}

impl Predictor for CirrlModel {
    fn predict_raw(&self, inputs: Inputs<'_>) -> Result<Vec<f64>> {
        CirrlModel::predict_raw(self, inputs.x)
    }
}

/// DRIG fitted on the true latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleModel {
    pub head: DrigHead,
}

impl Predictor for OracleModel {
    fn predict_raw(&self, inputs: Inputs<'_>) -> Result<Vec<f64>> {
        let z = inputs
            .z
            .ok_or_else(|| CirrlError::Contract("the oracle needs true latents".into()))?;
        self.head.predict_raw(z)
    }
}

pub fn mse(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() || y.is_empty() {
        return Err(CirrlError::Shape(format!("{} predictions for {} responses", pred.len(), y.len())));
    }
    Ok(pred.iter().zip(y).map(|(p, t)| (t - p).powi(2)).sum::<f64>() / y.len() as f64)
}

/// `MSE⁰ + γ Σ_e ω^e (MSE^e − MSE⁰)`; `env_mse[0]` is the reference.
pub fn plugin_risk(env_mse: &[f64], weights: &[f64], gamma: f64) -> Result<f64> {
    if env_mse.is_empty() || env_mse.len() != weights.len() {
        return Err(CirrlError::Contract("plug-in risk needs one weight per environment, reference first".into()));
    }
    let shift: f64 = env_mse.iter().zip(weights).map(|(m, w)| w * (m - env_mse[0])).sum();
    Ok(env_mse[0] + gamma * shift)
}

/// Per-environment MSE of raw-scale predictions, in dataset order.
pub fn env_mses<P: Predictor + ?Sized>(model: &P, data: &MultiEnvDataset) -> Result<Vec<f64>> {
    data.envs()
        .iter()
        .map(|e| {
            let pred = model.predict_raw(Inputs {
                x: &e.x,
                z: e.z_true.as_ref(),
            })?;
            mse(&pred, &e.y)
        })
        .collect()
}

/// Empirical plug-in worst-case risk of a model on training environments.
pub fn worst_case_plugin<P: Predictor + ?Sized>(model: &P, data: &MultiEnvDataset, gamma: f64, weighting: Weighting) -> Result<f64> {
    if data.envs().first().map(|e| e.label) != Some(0) {
        return Err(CirrlError::Contract("plug-in risk needs reference environment 0".into()));
    }
    let sizes: Vec<usize> = data.envs().iter().map(|e| e.n()).collect();
    plugin_risk(&env_mses(model, data)?, &weighting.weights(&sizes), gamma)
}

/// Raw-scale MSE on an OOD test environment.
pub fn ood_mse<P: Predictor + ?Sized>(model: &P, test: &TestEnv) -> Result<f64> {
    let pred = model.predict_raw(Inputs {
        x: &test.x,
        z: test.z_true.as_ref(),
    })?;
    mse(&pred, &test.y)
}

/// Training weight on the intervention strength that makes the uncertainty
/// set coincide with the generator's test perturbations.
pub fn matching_gamma(eta: f64, num_envs: usize, num_interventional: usize) -> f64 {
    eta * num_envs as f64 / num_interventional as f64
}

/// `T = S⁰ + γ Σ_e ω^e (S^e − S⁰ + μ^e μ^e^T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyBound {
    pub gamma: f64,
    pub t: DMatrix<f64>,
}

impl UncertaintyBound {
    pub fn new(moments: &[InterventionMoments], gamma: f64, weights: &[f64]) -> Result<Self> {
        if moments.is_empty() || moments.len() != weights.len() {
            return Err(CirrlError::Contract("bound needs one weight per environment, reference first".into()));
        }
        let covs = moments
            .iter()
            .map(|m| {
                let c = m.cov.to_nalgebra();
                if !c.is_square() || c.nrows() != m.mean.len() {
                    return Err(CirrlError::Shape("intervention covariance and mean disagree".into()));
                }
                if !is_symmetric(&c, 1e-12 * c.amax().max(1.0)) {
                    return Err(CirrlError::Data("intervention covariance is not symmetric".into()));
                }
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = covs[0].nrows();
        if covs.iter().any(|c| c.nrows() != dim) {
            return Err(CirrlError::Shape("intervention moments differ in dimension".into()));
        }
        let mut slack = DMatrix::zeros(dim, dim);
        for ((m, c), w) in moments.iter().zip(&covs).zip(weights) {
            let mu = DVector::from_column_slice(&m.mean);
            slack += (c - &covs[0] + &mu * mu.transpose()) * *w;
        }
        Ok(Self {
            gamma,
            t: symmetrize(&(&covs[0] + slack * gamma)),
        })
    }

    /// Smallest eigenvalue of `T − second_moment`.
    pub fn margin(&self, second_moment: &DMatrix<f64>) -> Result<f64> {
        if second_moment.shape() != self.t.shape() {
            return Err(CirrlError::Shape("second moment has the wrong shape".into()));
        }
        Ok(min_eigenvalue(&symmetrize(&(&self.t - second_moment))))
    }

    pub fn contains(&self, second_moment: &DMatrix<f64>) -> Result<bool> {
        Ok(self.margin(second_moment)? >= -MEMBERSHIP_TOL)
    }
}

/// Bound built from a generator's analytic intervention moments.
pub fn uncertainty_bound(sys: &ScmSystem, gamma: f64, weights: &[f64]) -> Result<UncertaintyBound> {
    UncertaintyBound::new(&sys.env_moments(), gamma, weights)
}

/// Residual loadings `w = C_{k,·} − b^T C_{0..k,·}` of `Y − b^T Z` on the shocks.
pub fn residual_loadings(sys: &ScmSystem, b: &[f64]) -> Result<DVector<f64>> {
    if b.len() != sys.k {
        return Err(CirrlError::Shape(format!("{} coefficients for {} latents", b.len(), sys.k)));
    }
    Ok(sys.response_map() - sys.latent_map().transpose() * DVector::from_column_slice(b))
}

/// Population plug-in risk of `b^T Z` from the generator's moments.
pub fn population_plugin(sys: &ScmSystem, b: &[f64], gamma: f64, weights: &[f64]) -> Result<f64> {
    let w = residual_loadings(sys, b)?;
    let eps = sys.eps();
    let env_mse: Vec<f64> = sys
        .env_moments()
        .iter()
        .map(|m| {
            let mu = DVector::from_column_slice(&m.mean);
            let second = &eps + m.cov.to_nalgebra() + &mu * mu.transpose();
            (w.transpose() * second * &w)[(0, 0)]
        })
        .collect();
    plugin_risk(&env_mse, weights, gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupOracle {
    /// `w^T Cov[ε] w`.
    pub unperturbed: f64,
    /// `w^T Cov[ε] w + w^T T w`.
    pub analytic: f64,
    /// Largest risk over the candidate shifts.
    pub candidate_max: f64,
    /// `|cos|` between the maximizing `u` and `T^{1/2} w`.
    pub argmax_alignment: f64,
}

pub const SUP_CANDIDATES: usize = 1_000;

/// Sup of the perturbed risk over `E[vv^T] ⪯ T`, analytically and by
/// enumerating deterministic shifts `v = T^{1/2} u`, `‖u‖ ≤ 1`. The first
/// candidate is the maximizing direction; the rest are seeded draws with
/// radii in `(0, 1]`.
pub fn mc_sup_oracle(sys: &ScmSystem, b: &[f64], t: &DMatrix<f64>) -> Result<SupOracle> {
    let w = residual_loadings(sys, b)?;
    let dim = w.len();
    if t.shape() != (dim, dim) {
        return Err(CirrlError::Shape("bound matrix has the wrong shape".into()));
    }
    let t = symmetrize(t);
    let lo = min_eigenvalue(&t);
    if lo < -MEMBERSHIP_TOL * t.amax().max(1.0) {
        return Err(CirrlError::NotPsd { eigenvalue: lo });
    }
    let unperturbed = (w.transpose() * sys.eps() * &w)[(0, 0)];
    let analytic = unperturbed + (w.transpose() * &t * &w)[(0, 0)];
    let root = psd_sqrt(&t);
    let star = &root * &w;
    let mut rng = rng_from_seed(0x5u64);
    let mut candidates = Vec::with_capacity(SUP_CANDIDATES);
    candidates.push(if star.norm() > 0.0 { star.normalize() } else { DVector::zeros(dim) });
    while candidates.len() < SUP_CANDIDATES {
        let g = DVector::from_vec(normal_vec(&mut rng, dim));
        let r: f64 = rng.random_range(0.0..1.0);
        candidates.push(g.normalize() * (1.0 - r));
    }
    let (best_u, candidate_max) = candidates
        .iter()
        .map(|u| {
            let v = &root * u;
            (u, unperturbed + w.dot(&v).powi(2))
        })
        .fold((&candidates[0], f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
    let argmax_alignment = if star.norm() > 0.0 && best_u.norm() > 0.0 {
        (best_u.dot(&star) / (best_u.norm() * star.norm())).abs()
    } else {
        1.0
    };
    Ok(SupOracle {
        unperturbed,
        analytic,
        candidate_max,
        argmax_alignment,
    })
}

/// Regresses elliptical `X ~ E(0, Σ)` on `MX` and returns the max absolute
/// entry error of the slope against `Σ M^T (M Σ M^T)^{-1}`.
pub fn elliptical_condexp_oracle(sigma: &DMatrix<f64>, m: &DMatrix<f64>, family: NoiseFamily, n: usize, seed: u64) -> Result<f64> {
    let d = sigma.nrows();
    if !sigma.is_square() || m.ncols() != d || m.nrows() > d {
        return Err(CirrlError::Shape("need square Σ and k × d M with k <= d".into()));
    }
    let mm = &m.clone();
    let rank = mm.clone().svd(false, false).rank(1e-10 * mm.amax().max(f64::MIN_POSITIVE));
    if rank < m.nrows() {
        return Err(CirrlError::Contract("M must have full row rank".into()));
    }
    let nu = match family {
        NoiseFamily::Gaussian => None,
        NoiseFamily::StudentT { nu } if nu >= 3.0 => Some(nu),
        other => return Err(CirrlError::Contract(format!("{other} is not an admissible elliptical family"))),
    };
    let mut rng = rng_from_seed(seed);
    let root = psd_sqrt(sigma);
    let mut x = DMatrix::from_row_slice(n, d, &normal_vec(&mut rng, n * d)) * root;
    if let Some(nu) = nu {
        let chi = ChiSquared::new(nu).expect("nu >= 3");
        for mut row in x.row_iter_mut() {
            let u: f64 = chi.sample(&mut rng);
            row *= (nu / u).sqrt();
        }
    }
    let mx = &x * m.transpose();
    let (coef, _) = lstsq_with_intercept(&mx, &x)?;
    let inner = m * sigma * m.transpose();
    let population = (solve_checked(&inner, &(m * sigma))?).transpose();
    Ok((coef.transpose() - population).amax())
}

/// `Z_learned ≈ N Z_true + m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLink {
    pub n: DenseMatrix,
    pub m: Vec<f64>,
    /// Per learned coordinate.
    pub r2: Vec<f64>,
    pub condition_number: f64,
}

pub fn fit_affine_link(z_true: &DenseMatrix, z_learned: &DenseMatrix) -> Result<AffineLink> {
    if z_true.rows() != z_learned.rows() {
        return Err(CirrlError::Shape("true and learned latents differ in rows".into()));
    }
    let zt = z_true.to_nalgebra();
    let zl = z_learned.to_nalgebra();
    let (coef, intercept) = lstsq_with_intercept(&zt, &zl)?;
    let fitted = &zt * &coef;
    let r2 = (0..zl.ncols())
        .map(|j| {
            let col = zl.column(j);
            let mean = col.mean();
            let ss_tot: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
            let ss_res: f64 = (0..col.len()).map(|i| (col[i] - fitted[(i, j)] - intercept[j]).powi(2)).sum();
            if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 }
        })
        .collect();
    let n = coef.transpose();
    Ok(AffineLink {
        condition_number: condition_number(&n),
        n: DenseMatrix::from_nalgebra(&n),
        m: intercept.as_slice().to_vec(),
        r2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodResult {
    pub family: String,
    pub eta: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub model: String,
    pub dataset: String,
    pub env_labels: Vec<usize>,
    pub env_mse: Vec<f64>,
    /// `(γ, plug-in risk)`, strictly increasing in γ.
    pub plugin: Vec<(f64, f64)>,
    pub ood: Vec<OodResult>,
}

impl RobustnessReport {
    /// Evaluates the plug-in risk on a γ grid (in parallel) and the OOD MSE
    /// on every test environment.
    pub fn evaluate<P: Predictor + Sync + ?Sized>(
        model: &P,
        model_id: &str,
        data: &MultiEnvDataset,
        dataset_id: &str,
        gammas: &[f64],
        weighting: Weighting,
        tests: &[TestEnv],
    ) -> Result<Self> {
        if gammas.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CirrlError::InvalidConfig("γ grid must be strictly increasing".into()));
        }
        let env_mse = env_mses(model, data)?;
        let sizes: Vec<usize> = data.envs().iter().map(|e| e.n()).collect();
        let weights = weighting.weights(&sizes);
        let plugin = gammas
            .par_iter()
            .map(|&g| plugin_risk(&env_mse, &weights, g).map(|r| (g, r)))
            .collect::<Result<Vec<_>>>()?;
        let ood = tests
            .iter()
            .map(|t| {
                Ok(OodResult {
                    family: t.family.to_string(),
                    eta: t.eta,
                    mse: ood_mse(model, t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: model_id.to_string(),
            dataset: dataset_id.to_string(),
            env_labels: data.labels(),
            env_mse,
            plugin,
            ood,
        })
    }

    /// One row per `(γ, OOD result)` pair; OOD columns are empty when there
    /// are no test environments.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["model".to_string(), "dataset".into(), "gamma".into(), "plugin_risk".into()];
        header.extend(self.env_labels.iter().map(|l| format!("mse_env_{l}")));
        header.extend(["ood_family".to_string(), "ood_eta".into(), "ood_mse".into()]);
        w.write_record(&header)?;
        let ood: Vec<Option<&OodResult>> = if self.ood.is_empty() { vec![None] } else { self.ood.iter().map(Some).collect() };
        for &(g, r) in &self.plugin {
            for o in &ood {
                let mut rec = vec![self.model.clone(), self.dataset.clone(), g.to_string(), r.to_string()];
                rec.extend(self.env_mse.iter().map(|m| m.to_string()));
                match o {
                    Some(o) => rec.extend([o.family.clone(), o.eta.to_string(), o.mse.to_string()]),
                    None => rec.extend([String::new(), String::new(), String::new()]),
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drig::{center_dataset, DrigVariant};
    use crate::scm_gen::{generate_test, generate_train, DecoderSpec, GenConfig};
    use proptest::prelude::*;

    fn linear_cfg(seed: u64) -> GenConfig {
        GenConfig {
            k: 2,
            d: 2,
            decoder: DecoderSpec::Polynomial { degree: 1 },
            n_per_env: 500,
            num_envs: 3,
            seed,
            ..GenConfig::default()
        }
    }

    struct Fixed(Vec<f64>);

    impl Predictor for Fixed {
        fn predict_raw(&self, inputs: Inputs<'_>) -> Result<Vec<f64>> {
            Ok(vec![self.0[0]; inputs.x.rows()])
        }
    }

    #[test]
    fn plugin_reduces_to_reference_and_constant_risks() {
        assert_eq!(plugin_risk(&[2.0, 5.0, 9.0], &[0.2, 0.3, 0.5], 0.0).unwrap(), 2.0);
        for g in [0.0, 1.0, 13.0] {
            assert_eq!(plugin_risk(&[4.0; 3], &[0.2, 0.3, 0.5], g).unwrap(), 4.0);
        }
        assert!(plugin_risk(&[1.0], &[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn plugin_on_dataset_matches_manual_sum() {
        let (_, data) = generate_train(&linear_cfg(1)).unwrap();
        let model = Fixed(vec![0.5]);
        let m = env_mses(&model, &data).unwrap();
        let manual = m[0] + 2.0 * (m[1] - m[0] + m[2] - m[0]) / 3.0;
        assert!((worst_case_plugin(&model, &data, 2.0, Weighting::Uniform).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn bound_instantiations() {
        let zero = InterventionMoments::zero(2);
        let one = InterventionMoments {
            mean: vec![1.0, 2.0],
            cov: DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 2.0]]).unwrap(),
        };
        let b0 = UncertaintyBound::new(&[zero.clone(), one.clone()], 0.0, &[0.5, 0.5]).unwrap();
        assert_eq!(b0.t, DMatrix::zeros(2, 2));
        let b = UncertaintyBound::new(&[zero, one.clone()], 3.0, &[0.0, 1.0]).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 2.5, 2.5, 6.0]) * 3.0;
        assert!((b.t - expected).amax() < 1e-12);

        let mut bad = one;
        bad.cov = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(
            UncertaintyBound::new(&[InterventionMoments::zero(2), bad], 1.0, &[0.5, 0.5]),
            Err(CirrlError::Data(_))
        ));
    }

    #[test]
    fn generated_test_env_lies_in_matching_bound() {
        for seed in 0..5 {
            let cfg = GenConfig { eta: 4.0, ..linear_cfg(seed) };
            let (sys, data) = generate_train(&cfg).unwrap();
            let test = generate_test(&sys, &cfg, 10).unwrap();
            let gamma = matching_gamma(cfg.eta, data.num_envs(), data.num_envs() - 1);
            let bound = uncertainty_bound(&sys, gamma, &data.uniform_weights()).unwrap();
            let xi = test.v_second_moment.to_nalgebra();
            assert!(bound.contains(&xi).unwrap());
            assert!((&bound.t - &xi).amax() < 1e-10);
            assert!(!uncertainty_bound(&sys, 0.5 * gamma, &data.uniform_weights()).unwrap().contains(&xi).unwrap());
        }
    }

    #[test]
    fn sup_oracle_with_no_perturbation_is_unperturbed_risk() {
        let (sys, _) = generate_train(&linear_cfg(2)).unwrap();
        let s = mc_sup_oracle(&sys, &[0.3, -0.1], &DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(s.analytic, s.unperturbed);
        assert_eq!(s.candidate_max, s.unperturbed);
    }

    #[test]
    fn sup_oracle_single_latent_by_hand() {
        let cfg = GenConfig { k: 1, d: 2, ..linear_cfg(3) };
        let (sys, _) = generate_train(&cfg).unwrap();
        let b = [0.4];
        let w = residual_loadings(&sys, &b).unwrap();
        let c = sys.c();
        assert!((w[0] - (c[(1, 0)] - 0.4 * c[(0, 0)])).abs() < 1e-15);
        assert!((w[1] - (c[(1, 1)] - 0.4 * c[(0, 1)])).abs() < 1e-15);
        let t = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let s = mc_sup_oracle(&sys, &b, &t).unwrap();
        assert!((s.analytic - s.unperturbed - w[0] * w[0]).abs() < 1e-12);
    }

    #[test]
    fn candidate_sup_never_exceeds_analytic() {
        let (sys, _) = generate_train(&linear_cfg(4)).unwrap();
        let mut rng = rng_from_seed(5);
        for _ in 0..10 {
            let a = DMatrix::from_row_slice(3, 3, &normal_vec(&mut rng, 9));
            let t = &a * a.transpose();
            let b = normal_vec(&mut rng, 2);
            let s = mc_sup_oracle(&sys, &b, &t).unwrap();
            assert!(s.candidate_max <= s.analytic + 1e-12);
            assert!(s.analytic - s.candidate_max <= 1e-6);
            assert!((s.argmax_alignment - 1.0).abs() <= 1e-6);
        }
        let neg = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(mc_sup_oracle(&sys, &[0.0, 0.0], &neg), Err(CirrlError::NotPsd { .. })));
    }

    #[test]
    fn population_plugin_equals_analytic_sup() {
        for seed in 0..5 {
            let (sys, data) = generate_train(&linear_cfg(seed)).unwrap();
            let weights = data.uniform_weights();
            for gamma in [0.0, 1.0, 7.5] {
                let b = [0.7, -0.2];
                let bound = uncertainty_bound(&sys, gamma, &weights).unwrap();
                let sup = mc_sup_oracle(&sys, &b, &bound.t).unwrap();
                let plug = population_plugin(&sys, &b, gamma, &weights).unwrap();
                assert!((plug - sup.analytic).abs() <= 1e-8 * sup.analytic.max(1.0));
            }
        }
    }

    #[test]
    fn sample_plugin_tracks_sup_in_linear_world() {
        let cfg = GenConfig { n_per_env: 100_000, ..linear_cfg(6) };
        let (sys, data) = generate_train(&cfg).unwrap();
        let latents: Vec<DenseMatrix> = data.envs().iter().map(|e| e.z_true.clone().unwrap()).collect();
        let centered = center_dataset(&data, &latents, Weighting::Uniform).unwrap();
        let oracle = OracleModel {
            head: DrigHead::fit(&centered, 2.0, DrigVariant::FirstOrder).unwrap(),
        };
        let bound = uncertainty_bound(&sys, 2.0, &data.uniform_weights()).unwrap();
        let sup = mc_sup_oracle(&sys, &oracle.head.fit.b_hat, &bound.t).unwrap();
        let plug = worst_case_plugin(&oracle, &data, 2.0, Weighting::Uniform).unwrap();
        assert!((plug - sup.analytic).abs() <= 0.02 * sup.analytic);
    }

    #[test]
    fn conditional_expectation_identity_and_scalar_cases() {
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, 0.3, 0.6, 1.0, 0.2, 0.3, 0.2, 1.5]);
        let err = elliptical_condexp_oracle(&sigma, &DMatrix::identity(3, 3), NoiseFamily::Gaussian, 200_000, 1).unwrap();
        assert!(err <= 0.02);
        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 0.5]));
        let sel = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        assert!(elliptical_condexp_oracle(&diag, &sel, NoiseFamily::Gaussian, 200_000, 2).unwrap() <= 0.02);
    }

    #[test]
    fn conditional_expectation_rejects_bad_inputs() {
        let sigma = DMatrix::identity(3, 3);
        let rank1 = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(matches!(
            elliptical_condexp_oracle(&sigma, &rank1, NoiseFamily::Gaussian, 100, 0),
            Err(CirrlError::Contract(_))
        ));
        let sel = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        assert!(elliptical_condexp_oracle(&sigma, &sel, NoiseFamily::Chi2, 100, 0).is_err());
        assert!(elliptical_condexp_oracle(&sigma, &sel, NoiseFamily::StudentT { nu: 2.0 }, 100, 0).is_err());
    }

    #[test]
    fn ood_mse_of_true_linear_model_is_noise_variance() {
        let cfg = GenConfig { eta: 2.0, exclude_y: true, ..linear_cfg(7) };
        let (sys, data) = generate_train(&cfg).unwrap();
        let test = generate_test(&sys, &cfg, 50_000).unwrap();
        let b: Vec<f64> = (0..2).map(|j| sys.b()[(2, j)]).collect();
        let latents: Vec<DenseMatrix> = data.envs().iter().map(|e| e.z_true.clone().unwrap()).collect();
        let mut head = DrigHead::fit(&center_dataset(&data, &latents, Weighting::Uniform).unwrap(), 0.0, DrigVariant::FirstOrder).unwrap();
        head.fit.b_hat = b.clone();
        head.z_center = vec![0.0, 0.0];
        head.y_center = 0.0;
        let w = residual_loadings(&sys, &b).unwrap();
        assert!((w - DVector::from_vec(vec![0.0, 0.0, 1.0])).amax() < 1e-12);
        let noise = sys.eps()[(2, 2)];
        let got = ood_mse(&OracleModel { head }, &test).unwrap();
        assert!((got - noise).abs() <= 0.05 * noise, "{got} vs {noise}");
    }

    #[test]
    fn ood_mse_trivial_cases() {
        let cfg = GenConfig { eta: 1.0, ..linear_cfg(8) };
        let (sys, _) = generate_train(&cfg).unwrap();
        let test = generate_test(&sys, &cfg, 200).unwrap();
        let zero = Fixed(vec![0.0]);
        let second = test.y.iter().map(|v| v * v).sum::<f64>() / 200.0;
        assert!((ood_mse(&zero, &test).unwrap() - second).abs() < 1e-12);
        let mut twice = test.clone();
        twice.x = DenseMatrix::vstack(&[&test.x, &test.x]).unwrap();
        twice.y.extend(test.y.clone());
        twice.z_true = None;
        let (a, b) = (ood_mse(&Fixed(vec![0.3]), &twice).unwrap(), ood_mse(&Fixed(vec![0.3]), &test).unwrap());
        assert!((a - b).abs() <= 1e-14 * b);
    }

    #[test]
    fn affine_link_cases() {
        let mut rng = rng_from_seed(9);
        let z = DenseMatrix::new(10_000, 2, normal_vec(&mut rng, 20_000)).unwrap();
        let lin = z.map(|v| 2.0 * v + 1.0);
        let link = fit_affine_link(&z, &lin).unwrap();
        assert!((link.n.to_nalgebra() - DMatrix::identity(2, 2) * 2.0).amax() < 1e-10);
        assert!(link.m.iter().all(|v| (v - 1.0).abs() < 1e-10));
        assert!(link.r2.iter().all(|r| (r - 1.0).abs() < 1e-12));
        assert!((link.condition_number - 1.0).abs() < 1e-10);

        let noise = DenseMatrix::new(10_000, 2, normal_vec(&mut rng, 20_000)).unwrap();
        assert!(fit_affine_link(&z, &noise).unwrap().r2.iter().all(|r| *r <= 0.05));
    }

    #[test]
    fn report_csv_layout() {
        let cfg = GenConfig { eta: 1.0, ..linear_cfg(10) };
        let (sys, data) = generate_train(&cfg).unwrap();
        let test = generate_test(&sys, &cfg, 100).unwrap();
        let r = RobustnessReport::evaluate(&Fixed(vec![0.0]), "zero", &data, "lin", &[0.0, 1.0], Weighting::Uniform, &[test]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "model,dataset,gamma,plugin_risk,mse_env_0,mse_env_1,mse_env_2,ood_family,ood_eta,ood_mse");
        assert_eq!(lines.len(), 3);
        assert!(RobustnessReport::evaluate(&Fixed(vec![0.0]), "z", &data, "l", &[1.0, 1.0], Weighting::Uniform, &[]).is_err());
    }

    proptest! {
        #[test]
        fn plugin_is_affine_in_gamma(
            mses in prop::collection::vec(0.0f64..10.0, 2..6),
            g1 in 0.0f64..5.0, dg in 0.1f64..5.0,
        ) {
            let w = vec![1.0 / mses.len() as f64; mses.len()];
            let g2 = g1 + dg;
            let g3 = g2 + dg;
            let r1 = plugin_risk(&mses, &w, g1).unwrap();
            let r2 = plugin_risk(&mses, &w, g2).unwrap();
            let r3 = plugin_risk(&mses, &w, g3).unwrap();
            let slope: f64 = mses.iter().zip(&w).map(|(m, w)| w * (m - mses[0])).sum();
            prop_assert!(((r2 - r1) - slope * dg).abs() <= 1e-9 * (1.0 + r1.abs() + r2.abs()));
            prop_assert!(((r3 - r2) - (r2 - r1)).abs() <= 1e-9 * (1.0 + r3.abs()));
        }

        #[test]
        fn bound_grows_with_gamma(seed in 0u64..1000, g in 0.0f64..5.0, dg in 0.0f64..5.0) {
            let (sys, data) = generate_train(&GenConfig { n_per_env: 5, ..linear_cfg(seed) }).unwrap();
            let w = data.uniform_weights();
            let lo = uncertainty_bound(&sys, g, &w).unwrap();
            let hi = uncertainty_bound(&sys, g + dg, &w).unwrap();
            prop_assert!(min_eigenvalue(&(&hi.t - &lo.t)) >= -1e-10);
        }

        #[test]
        fn weaker_test_shifts_stay_in_matching_bound(seed in 0u64..1000, eta in 0.5f64..8.0, frac in 0.0f64..1.0) {
            let cfg = GenConfig { eta, n_per_env: 5, ..linear_cfg(seed) };
            let (sys, data) = generate_train(&cfg).unwrap();
            let gamma = matching_gamma(eta, data.num_envs(), data.num_envs() - 1);
            let bound = uncertainty_bound(&sys, gamma, &data.uniform_weights()).unwrap();
            let weaker = GenConfig { eta: frac * eta, ..cfg };
            let test = generate_test(&sys, &weaker, 5).unwrap();
            prop_assert!(bound.contains(&test.v_second_moment.to_nalgebra()).unwrap());
        }
    }
}
