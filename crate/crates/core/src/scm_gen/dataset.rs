use serde::{Deserialize, Serialize};

use crate::error::{CirrlError, Result};
use crate::tensor_nn::DenseMatrix;

/// First and second central moments of an environment's additive intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionMoments {
    pub mean: Vec<f64>,
    pub cov: DenseMatrix,
}

impl InterventionMoments {
    pub fn zero(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            cov: DenseMatrix::zeros(dim, dim),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.mean.iter().all(|v| *v == 0.0) && self.cov.as_slice().iter().all(|v| *v == 0.0)
    }
}

/// Samples from one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvData {
    pub label: usize,
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    pub z_true: Option<DenseMatrix>,
    /// Realized `ε + δ` per row, kept so the node equations can be audited.
    pub shocks: Option<DenseMatrix>,
    pub moments: Option<InterventionMoments>,
}

impl EnvData {
    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// Per-environment covariates, responses and (for synthetic data) true latents.
/// Environments are kept sorted by label; label 0 is the observational reference.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiEnvDataset {
    envs: Vec<EnvData>,
}

impl MultiEnvDataset {
    pub fn new(mut envs: Vec<EnvData>) -> Result<Self> {
        envs.sort_by_key(|e| e.label);
        let ds = Self { envs };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .envs
            .first()
            .ok_or_else(|| CirrlError::Data("dataset has no environments".into()))?;
        if first.label != 0 {
            return Err(CirrlError::Contract("reference environment 0 is missing".into()));
        }
        let d = first.x.cols();
        let k = first.z_true.as_ref().map(|z| z.cols());
        for w in self.envs.windows(2) {
            if w[0].label == w[1].label {
                return Err(CirrlError::Data(format!("duplicate environment label {}", w[0].label)));
            }
        }
        for e in &self.envs {
            if e.x.cols() != d {
                return Err(CirrlError::Shape(format!(
                    "environment {} has {} covariates, expected {d}",
                    e.label,
                    e.x.cols()
                )));
            }
            if e.x.rows() != e.y.len() {
                return Err(CirrlError::Shape(format!("environment {}: X/Y row counts differ", e.label)));
            }
            if e.z_true.as_ref().map(|z| (z.rows(), z.cols())) != k.map(|k| (e.y.len(), k)) {
                return Err(CirrlError::Shape(format!(
                    "environment {}: latent columns inconsistent",
                    e.label
                )));
            }
        }
        if let Some(m) = &first.moments {
            if !m.is_zero() {
                return Err(CirrlError::Contract("environment 0 must have zero intervention".into()));
            }
        }
        Ok(())
    }

    pub fn envs(&self) -> &[EnvData] {
        &self.envs
    }

    pub fn num_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.envs.iter().map(|e| e.label).collect()
    }

    pub fn env(&self, label: usize) -> Option<&EnvData> {
        self.envs.iter().find(|e| e.label == label)
    }

    pub fn reference(&self) -> &EnvData {
        &self.envs[0]
    }

    pub fn d(&self) -> usize {
        self.envs[0].x.cols()
    }

    pub fn latent_dim(&self) -> Option<usize> {
        self.envs[0].z_true.as_ref().map(|z| z.cols())
    }

    pub fn n_total(&self) -> usize {
        self.envs.iter().map(EnvData::n).sum()
    }

    /// Sample-proportional weights `n_e / n`.
    pub fn proportional_weights(&self) -> Vec<f64> {
        let n = self.n_total() as f64;
        self.envs.iter().map(|e| e.n() as f64 / n).collect()
    }

    pub fn uniform_weights(&self) -> Vec<f64> {
        vec![1.0 / self.envs.len() as f64; self.envs.len()]
    }

    /// All rows stacked in label order, with each row's environment index
    /// (position in [`Self::envs`]).
    pub fn pooled(&self) -> (DenseMatrix, Vec<f64>, Vec<usize>) {
        let blocks: Vec<&DenseMatrix> = self.envs.iter().map(|e| &e.x).collect();
        let x = DenseMatrix::vstack(&blocks).expect("validated widths");
        let y = self.envs.iter().flat_map(|e| e.y.iter().copied()).collect();
        let env_index = self
            .envs
            .iter()
            .enumerate()
            .flat_map(|(i, e)| std::iter::repeat_n(i, e.n()))
            .collect();
        (x, y, env_index)
    }
}
