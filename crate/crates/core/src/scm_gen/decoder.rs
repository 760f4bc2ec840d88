//! Ground-truth mixing functions from latents `z ∈ R^k` to covariates `x ∈ R^d`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CirrlError, Result};
use crate::rng::{derive_seed, normal_vec, rng_from_seed};
use crate::tensor_nn::{DenseMatrix, Mlp, MlpConfig};

/// How to build a decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecoderSpec {
    Polynomial { degree: u32 },
    ReluNet { width: usize, depth: usize },
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec::Polynomial { degree: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecoderFn {
    /// `x = coeff * [z^α for 1 <= |α| <= degree]` (no constant feature).
    Polynomial {
        degree: u32,
        exponents: Vec<Vec<u32>>,
        coeff: DenseMatrix,
    },
    /// Fixed random ReLU network evaluated in eval mode.
    ReluNet { net: Mlp },
}

/// Exponent vectors of all monomials in `k` variables with total degree in
/// `1..=degree`, ordered by degree then lexicographically (descending).
pub fn monomial_exponents(k: usize, degree: u32) -> Vec<Vec<u32>> {
    fn rec(k: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == k - 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=remaining).rev() {
            prefix.push(e);
            rec(k, remaining - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 1..=degree {
        rec(k, total, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

impl DecoderFn {
    /// Polynomial decoder with an explicit `d × F` coefficient matrix.
    pub fn polynomial(k: usize, degree: u32, coeff: DenseMatrix) -> Result<Self> {
        let exponents = monomial_exponents(k, degree);
        if coeff.cols() != exponents.len() {
            return Err(CirrlError::Shape(format!(
                "{} monomials need {} coefficient columns, got {}",
                exponents.len(),
                exponents.len(),
                coeff.cols()
            )));
        }
        Ok(DecoderFn::Polynomial {
            degree,
            exponents,
            coeff,
        })
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            DecoderFn::Polynomial { exponents, .. } => exponents[0].len(),
            DecoderFn::ReluNet { net } => net.input_width(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            DecoderFn::Polynomial { coeff, .. } => coeff.rows(),
            DecoderFn::ReluNet { net } => net.output_width(),
        }
    }

    /// Maps latent rows to covariate rows.
    pub fn decode(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        if z.cols() != self.latent_dim() {
            return Err(CirrlError::Shape(format!(
                "decoder expects {} latent columns, got {}",
                self.latent_dim(),
                z.cols()
            )));
        }
        match self {
            DecoderFn::Polynomial { exponents, coeff, .. } => {
                let features = DenseMatrix::from_fn(z.rows(), exponents.len(), |i, f| monomial(z.row(i), &exponents[f]));
                features.matmul_t(coeff)
            }
            DecoderFn::ReluNet { net } => net.forward_eval(z),
        }
    }

    /// `d × k` Jacobian at one latent point.
    pub fn jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let k = self.latent_dim();
        match self {
            DecoderFn::Polynomial { exponents, coeff, .. } => {
                let dfeat = DMatrix::from_fn(exponents.len(), k, |f, i| {
                    let a = exponents[f][i];
                    if a == 0 {
                        return 0.0;
                    }
                    let mut e = exponents[f].clone();
                    e[i] -= 1;
                    a as f64 * monomial(z, &e)
                });
                Ok(coeff.to_nalgebra() * dfeat)
            }
            DecoderFn::ReluNet { .. } => {
                let h = 1e-6;
                let d = self.output_dim();
                let mut jac = DMatrix::zeros(d, k);
                for i in 0..k {
                    let mut plus = z.to_vec();
                    let mut minus = z.to_vec();
                    plus[i] += h;
                    minus[i] -= h;
                    let fp = self.decode(&DenseMatrix::new(1, k, plus)?)?;
                    let fm = self.decode(&DenseMatrix::new(1, k, minus)?)?;
                    for r in 0..d {
                        jac[(r, i)] = (fp.get(0, r) - fm.get(0, r)) / (2.0 * h);
                    }
                }
                Ok(jac)
            }
        }
    }
}

fn monomial(z: &[f64], exps: &[u32]) -> f64 {
    z.iter().zip(exps).map(|(v, &e)| v.powi(e as i32)).product()
}

fn full_rank(m: &DMatrix<f64>, rank: usize) -> bool {
    let sv = m.clone().singular_values();
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.len() >= rank && s[rank - 1] > 1e-8 * s[0].max(f64::MIN_POSITIVE)
}

const JACOBIAN_PROBES: usize = 50;
const MAX_RESAMPLES: usize = 20;

/// Builds a random decoder and resamples until its Jacobian has rank `k` at
/// 50 random latent points (and, for polynomials with `d >= F`, the
/// coefficient matrix has full column rank).
pub fn make_decoder(spec: &DecoderSpec, k: usize, d: usize, seed: u64) -> Result<DecoderFn> {
    if k == 0 || d < k {
        return Err(CirrlError::InvalidConfig(format!("decoder needs 1 <= k <= d, got k={k}, d={d}")));
    }
    for attempt in 0..MAX_RESAMPLES {
        let mut rng = rng_from_seed(derive_seed(seed, attempt as u64));
        let dec = match spec {
            DecoderSpec::Polynomial { degree } => {
                if *degree == 0 {
                    return Err(CirrlError::InvalidConfig("polynomial degree must be >= 1".into()));
                }
                let n_feat = monomial_exponents(k, *degree).len();
                let coeff = DenseMatrix::new(d, n_feat, normal_vec(&mut rng, d * n_feat))?;
                if d >= n_feat && !full_rank(&coeff.to_nalgebra(), n_feat) {
                    continue;
                }
                DecoderFn::polynomial(k, *degree, coeff)?
            }
            DecoderSpec::ReluNet { width, depth } => {
                let cfg = MlpConfig::stack(k, *width, *depth, d).with_seed(rng.random());
                DecoderFn::ReluNet { net: Mlp::new(cfg)? }
            }
        };
        let mut probe_rng = rng_from_seed(derive_seed(seed, 1_000 + attempt as u64));
        let ok = (0..JACOBIAN_PROBES).all(|_| {
            let z = normal_vec(&mut probe_rng, k);
            dec.jacobian(&z).map(|j| full_rank(&j, k)).unwrap_or(false)
        });
        if ok {
            return Ok(dec);
        }
    }
    Err(CirrlError::Generation(format!(
        "no decoder with rank-{k} Jacobian after {MAX_RESAMPLES} resamples"
    )))
}
