//! Step two: center latents and responses on the observational environment
//! and fit the distributionally robust linear coefficients
//! `b̂_γ = argmin MSE⁰(b) + γ Σ_e ω^e (MSE^e(b) − MSE⁰(b))`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CirrlError, Result};
use crate::linalg::{max_eigenvalue, solve_vec, symmetrize};
use crate::repr_train::{encode, ReprModel};
use crate::scm_gen::MultiEnvDataset;
use crate::tensor_nn::DenseMatrix;

/// How environment weights `ω^e` are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `1 / |E|`.
    #[default]
    Uniform,
    /// `n_e / n`.
    Proportional,
}

impl Weighting {
    pub fn weights(self, sizes: &[usize]) -> Vec<f64> {
        match self {
            Weighting::Uniform => vec![1.0 / sizes.len() as f64; sizes.len()],
            Weighting::Proportional => {
                let n: usize = sizes.iter().sum();
                sizes.iter().map(|&s| s as f64 / n as f64).collect()
            }
        }
    }
}

/// Which response enters the environment sum of the normal equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrigVariant {
    /// `Z^e_c` paired with `Y^e_c`: the stationarity condition of the objective.
    #[default]
    FirstOrder,
    /// `Z^e_c` paired with the observational `Y^0_c`; needs equal sample sizes.
    Eq5Literal,
}

/// Per-environment latents and responses, centered on environment 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredEnvData {
    pub labels: Vec<usize>,
    pub z: Vec<DMatrix<f64>>,
    pub y: Vec<DVector<f64>>,
    pub z_center: Vec<f64>,
    pub y_center: f64,
    pub weights: Vec<f64>,
}

impl CenteredEnvData {
    pub fn latent_dim(&self) -> usize {
        self.z_center.len()
    }

    pub fn num_envs(&self) -> usize {
        self.labels.len()
    }

    /// `Z_c^T Z_c / n_e`.
    pub fn gram(&self, e: usize) -> DMatrix<f64> {
        symmetrize(&(self.z[e].transpose() * &self.z[e] / self.z[e].nrows() as f64))
    }

    /// `Z_c^T Y_c / n_e`.
    pub fn cross(&self, e: usize) -> DVector<f64> {
        self.z[e].transpose() * &self.y[e] / self.z[e].nrows() as f64
    }

    /// `Z_c^e{}^T Y_c^0 / n`, rows paired by index.
    fn cross_literal(&self, e: usize) -> Result<DVector<f64>> {
        if self.z[e].nrows() != self.y[0].len() {
            return Err(CirrlError::Contract(format!(
                "literal variant pairs rows across environments: env {} has {} rows, env 0 has {}",
                self.labels[e],
                self.z[e].nrows(),
                self.y[0].len()
            )));
        }
        Ok(self.z[e].transpose() * &self.y[0] / self.y[0].len() as f64)
    }

    pub fn mse(&self, e: usize, b: &DVector<f64>) -> f64 {
        let r = &self.y[e] - &self.z[e] * b;
        r.norm_squared() / r.len() as f64
    }
}

/// Subtracts the environment-0 means of latents and responses from every
/// environment. The first entry must be label 0.
pub fn center(latents: &[DenseMatrix], ys: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> Result<CenteredEnvData> {
    if labels.first() != Some(&0) {
        return Err(CirrlError::Contract("reference environment 0 must come first".into()));
    }
    if latents.len() != labels.len() || ys.len() != labels.len() || weights.len() != labels.len() {
        return Err(CirrlError::Shape("latents, responses, labels and weights differ in length".into()));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w > 0.0)) || (sum - 1.0).abs() > 1e-12 {
        return Err(CirrlError::InvalidConfig(format!(
            "environment weights must be positive and sum to 1, got sum {sum}"
        )));
    }
    let k = latents[0].cols();
    for (e, (z, y)) in latents.iter().zip(ys).enumerate() {
        if z.cols() != k || z.rows() != y.len() {
            return Err(CirrlError::Shape(format!("environment {}: latent/response shapes", labels[e])));
        }
    }
    if latents[0].rows() < 2 {
        return Err(CirrlError::Contract("environment 0 needs at least two rows".into()));
    }
    let z_center = latents[0].column_means();
    let y_center = ys[0].iter().sum::<f64>() / ys[0].len() as f64;
    let z = latents
        .iter()
        .map(|m| DMatrix::from_fn(m.rows(), k, |i, j| m.get(i, j) - z_center[j]))
        .collect();
    let y = ys
        .iter()
        .map(|v| DVector::from_iterator(v.len(), v.iter().map(|t| t - y_center)))
        .collect();
    Ok(CenteredEnvData {
        labels: labels.to_vec(),
        z,
        y,
        z_center,
        y_center,
        weights: weights.to_vec(),
    })
}

/// Centers per-environment latents (in dataset order) with the dataset's responses.
pub fn center_dataset(data: &MultiEnvDataset, latents: &[DenseMatrix], weighting: Weighting) -> Result<CenteredEnvData> {
    let ys: Vec<Vec<f64>> = data.envs().iter().map(|e| e.y.clone()).collect();
    let sizes: Vec<usize> = data.envs().iter().map(|e| e.n()).collect();
    center(latents, &ys, &data.labels(), &weighting.weights(&sizes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrigFit {
    pub gamma: f64,
    pub variant: DrigVariant,
    pub b_hat: Vec<f64>,
    pub grams: Vec<DenseMatrix>,
    pub cross: Vec<Vec<f64>>,
    pub objective: f64,
}

impl DrigFit {
    pub fn b(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.b_hat)
    }
}

/// `(1−γ) M⁰ + γ Σ_e ω^e M^e` for any per-environment moment.
fn combine<T>(data: &CenteredEnvData, gamma: f64, moment: impl Fn(usize) -> Result<T>) -> Result<T>
where
    T: std::ops::Mul<f64, Output = T> + std::ops::Add<T, Output = T>,
{
    let mut acc = moment(0)? * (1.0 - gamma);
    for (e, &w) in data.weights.iter().enumerate() {
        acc = acc + moment(e)? * (gamma * w);
    }
    Ok(acc)
}

/// Matrix `A` and vector `c` of the normal equations `A b = c`.
pub fn normal_equations(data: &CenteredEnvData, gamma: f64, variant: DrigVariant) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let a = combine(data, gamma, |e| Ok(data.gram(e)))?;
    let c = match variant {
        DrigVariant::FirstOrder => combine(data, gamma, |e| Ok(data.cross(e)))?,
        DrigVariant::Eq5Literal => combine(data, gamma, |e| data.cross_literal(e))?,
    };
    Ok((a, c))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(CirrlError::InvalidConfig(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    Ok(())
}

/// Solves the normal equations directly. A near-singular system fails with
/// the smallest singular value rather than falling back to a pseudo-inverse.
pub fn drig_closed_form(data: &CenteredEnvData, gamma: f64, variant: DrigVariant) -> Result<DrigFit> {
    check_gamma(gamma)?;
    let (a, c) = normal_equations(data, gamma, variant)?;
    let b = solve_vec(&a, &c)?;
    if !b.iter().all(|v| v.is_finite()) {
        return Err(CirrlError::Numeric("non-finite DRIG coefficients".into()));
    }
    Ok(DrigFit {
        gamma,
        variant,
        b_hat: b.as_slice().to_vec(),
        grams: (0..data.num_envs()).map(|e| DenseMatrix::from_nalgebra(&data.gram(e))).collect(),
        cross: (0..data.num_envs()).map(|e| data.cross(e).as_slice().to_vec()).collect(),
        objective: drig_objective(data, &b, gamma),
    })
}

/// `MSE⁰(b) + γ Σ_e ω^e (MSE^e(b) − MSE⁰(b))`.
pub fn drig_objective(data: &CenteredEnvData, b: &DVector<f64>, gamma: f64) -> f64 {
    let mse0 = data.mse(0, b);
    let shift: f64 = data.weights.iter().enumerate().map(|(e, w)| w * (data.mse(e, b) - mse0)).sum();
    mse0 + gamma * shift
}

/// `∇_b` of [`drig_objective`]: `2 (A b − c)` with first-order moments.
pub fn drig_gradient(data: &CenteredEnvData, b: &DVector<f64>, gamma: f64) -> Result<DVector<f64>> {
    let (a, c) = normal_equations(data, gamma, DrigVariant::FirstOrder)?;
    Ok((a * b - c) * 2.0)
}

/// Step size `1 / (2 λ_max(A))`, stable for gradient descent when `A ≻ 0`.
pub fn safe_step_size(data: &CenteredEnvData, gamma: f64) -> Result<f64> {
    let (a, _) = normal_equations(data, gamma, DrigVariant::FirstOrder)?;
    let top = max_eigenvalue(&symmetrize(&a));
    if !(top > 0.0) {
        return Err(CirrlError::Numeric("normal-equation matrix has no positive eigenvalue".into()));
    }
    Ok(0.5 / top)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeFit {
    pub b: DVector<f64>,
    pub trace: Vec<f64>,
}

/// Consecutive objective increases tolerated before giving up.
const MAX_RISING_STEPS: usize = 50;

/// Full-batch gradient descent on the objective from `b = 0`.
pub fn drig_fit_iterative(data: &CenteredEnvData, gamma: f64, steps: usize, lr: f64) -> Result<IterativeFit> {
    check_gamma(gamma)?;
    if !(lr > 0.0) {
        return Err(CirrlError::InvalidConfig(format!("lr must be > 0, got {lr}")));
    }
    let (a, c) = normal_equations(data, gamma, DrigVariant::FirstOrder)?;
    let mut b = DVector::zeros(data.latent_dim());
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(drig_objective(data, &b, gamma));
    let mut rising = 0;
    for step in 1..=steps {
        let grad = (&a * &b - &c) * 2.0;
        b -= grad * lr;
        let obj = drig_objective(data, &b, gamma);
        if !obj.is_finite() {
            return Err(CirrlError::StepSize { steps: step });
        }
        rising = if obj > *trace.last().expect("nonempty") { rising + 1 } else { 0 };
        trace.push(obj);
        if rising >= MAX_RISING_STEPS {
            return Err(CirrlError::StepSize { steps: step });
        }
    }
    Ok(IterativeFit { b, trace })
}

/// Linear head on centered latents: `ŷ_c = b^T (z − z̄⁰)`, `ŷ = ŷ_c + ȳ⁰`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrigHead {
    pub fit: DrigFit,
    pub z_center: Vec<f64>,
    pub y_center: f64,
    pub weights: Vec<f64>,
    pub env_labels: Vec<usize>,
}

impl DrigHead {
    pub fn fit(data: &CenteredEnvData, gamma: f64, variant: DrigVariant) -> Result<Self> {
        Ok(Self {
            fit: drig_closed_form(data, gamma, variant)?,
            z_center: data.z_center.clone(),
            y_center: data.y_center,
            weights: data.weights.clone(),
            env_labels: data.labels.clone(),
        })
    }

    pub fn predict_centered(&self, latents: &DenseMatrix) -> Result<Vec<f64>> {
        let k = self.z_center.len();
        if latents.cols() != k {
            return Err(CirrlError::Shape(format!("head expects {k} latent columns, got {}", latents.cols())));
        }
        Ok((0..latents.rows())
            .map(|i| {
                latents
                    .row(i)
                    .iter()
                    .zip(&self.z_center)
                    .zip(&self.fit.b_hat)
                    .map(|((z, c), b)| b * (z - c))
                    .sum()
            })
            .collect())
    }

    pub fn predict_raw(&self, latents: &DenseMatrix) -> Result<Vec<f64>> {
        Ok(self.predict_centered(latents)?.into_iter().map(|v| v + self.y_center).collect())
    }

    pub fn report(&self, data: &CenteredEnvData) -> FitReport {
        let b = self.fit.b();
        FitReport {
            gamma: self.fit.gamma,
            variant: self.fit.variant,
            b_hat: self.fit.b_hat.clone(),
            env_labels: data.labels.clone(),
            env_mse: (0..data.num_envs()).map(|e| data.mse(e, &b)).collect(),
            objective: self.fit.objective,
            z_center: self.z_center.clone(),
            y_center: self.y_center,
            weights: self.weights.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub gamma: f64,
    pub variant: DrigVariant,
    pub b_hat: Vec<f64>,
    pub env_labels: Vec<usize>,
    pub env_mse: Vec<f64>,
    pub objective: f64,
    pub z_center: Vec<f64>,
    pub y_center: f64,
    pub weights: Vec<f64>,
}

/// Learned representation followed by a DRIG head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirrlModel {
    pub repr: ReprModel,
    pub head: DrigHead,
}

impl CirrlModel {
    /// Encodes every training environment, centers, and fits the head.
    pub fn fit(repr: ReprModel, data: &MultiEnvDataset, gamma: f64, variant: DrigVariant, weighting: Weighting) -> Result<Self> {
        let latents = data.envs().iter().map(|e| encode(&repr, &e.x)).collect::<Result<Vec<_>>>()?;
        let centered = center_dataset(data, &latents, weighting)?;
        let head = DrigHead::fit(&centered, gamma, variant)?;
        Ok(Self { repr, head })
    }

    pub fn predict_centered(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        self.head.predict_centered(&encode(&self.repr, x)?)
    }

    pub fn predict_raw(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        self.head.predict_raw(&encode(&self.repr, x)?)
    }
}
