//! Random DAG skeletons, norm-one PSD matrices and intervention laws.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{max_eigenvalue, symmetrize};
use crate::rng::{normal_vec, standard_normal};
use crate::tensor_nn::DenseMatrix;

/// Adjacency `B` over `k` latents plus the response (last index) and its
/// total-effect map `C = (I - B)^{-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DagSkeleton {
    pub adjacency: DMatrix<f64>,
    pub total_effect: DMatrix<f64>,
}

/// Draws a DAG on `k + 1` nodes. Each ordered pair is an edge with
/// probability 1/2; `B[i][j]` (parent `j` of node `i`) survives only when
/// `i > j`, so `B` is strictly lower triangular. Weights are standard normal.
pub fn sample_dag<R: Rng + ?Sized>(k: usize, rng: &mut R) -> DagSkeleton {
    let n = k + 1;
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            // every candidate edge consumes the same draws, kept or not
            let present = rng.random::<f64>() < 0.5;
            let weight = standard_normal(rng);
            if present && i > j {
                b[(i, j)] = weight;
            }
        }
    }
    let total_effect = total_effect(&b);
    DagSkeleton {
        adjacency: b,
        total_effect,
    }
}

/// `(I - B)^{-1}` by LU with partial pivoting.
pub fn total_effect(b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = b.nrows();
    (DMatrix::identity(n, n) - b)
        .lu()
        .try_inverse()
        .expect("I - B is unit lower triangular for an acyclic B")
}

/// Random Gram matrix `A A^T` scaled to spectral norm one.
pub fn psd_norm1<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_vec(dim, dim, normal_vec(rng, dim * dim));
    if dim == 1 {
        return DMatrix::from_element(1, 1, 1.0);
    }
    let g = symmetrize(&(&a * a.transpose()));
    let top = max_eigenvalue(&g);
    g / top
}

/// Law of one training environment's additive intervention `δ ~ N(mu, sigma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvIntervention {
    pub mu: Vec<f64>,
    pub sigma: DenseMatrix,
}

impl EnvIntervention {
    /// Unit-norm random mean and norm-one covariance; with `exclude_y` the
    /// response coordinate (last) is zeroed in both.
    pub fn sample<R: Rng + ?Sized>(dim: usize, exclude_y: bool, rng: &mut R) -> Self {
        let raw = DVector::from_vec(normal_vec(rng, dim));
        let mut mu = raw.clone() / raw.norm();
        let mut sigma = psd_norm1(dim, rng);
        if exclude_y {
            mu[dim - 1] = 0.0;
            for i in 0..dim {
                sigma[(dim - 1, i)] = 0.0;
                sigma[(i, dim - 1)] = 0.0;
            }
        }
        Self {
            mu: mu.as_slice().to_vec(),
            sigma: DenseMatrix::from_nalgebra(&sigma),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mu)
    }

    pub fn cov(&self) -> DMatrix<f64> {
        self.sigma.to_nalgebra()
    }

    /// `E[δ δ^T] = Σ + μ μ^T`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let mu = self.mean();
        self.cov() + &mu * mu.transpose()
    }
}

/// Test-intervention second moment `(η / |E|) Σ_e (Σ_e + μ_e μ_e^T)` over the
/// given (interventional) environments.
pub fn xi_eta(interventions: &[EnvIntervention], eta: f64) -> DMatrix<f64> {
    assert!(!interventions.is_empty(), "xi_eta needs at least one intervention");
    let dim = interventions[0].mu.len();
    let sum = interventions
        .iter()
        .fold(DMatrix::zeros(dim, dim), |acc, iv| acc + iv.second_moment());
    sum * (eta / interventions.len() as f64)
}
