//! Small dense linear-algebra helpers over `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{CirrlError, Result};
use crate::tensor_nn::DenseMatrix;

/// Relative singular-value floor below which a system is treated as singular.
pub const SINGULAR_RTOL: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

/// Eigenvalues (ascending) and matching eigenvector columns of a symmetric matrix.
pub fn sym_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).0.first().copied().unwrap_or(0.0)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).0.last().copied().unwrap_or(0.0)
}

/// Symmetric square root of a PSD matrix; negative eigenvalues are clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let d = DMatrix::from_diagonal(&DVector::from_iterator(vals.len(), vals.iter().map(|v| v.max(0.0).sqrt())));
    symmetrize(&(&vecs * d * vecs.transpose()))
}

/// Solves `a x = b`, refusing systems whose smallest singular value is below
/// `SINGULAR_RTOL` times the largest.
pub fn solve_checked(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sv = a.clone().singular_values();
    let sigma_max = sv.max();
    let sigma_min = sv.min();
    if !(sigma_min > SINGULAR_RTOL * sigma_max) {
        return Err(CirrlError::RankDeficient { sigma_min, sigma_max });
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or(CirrlError::RankDeficient { sigma_min, sigma_max })
}

pub fn solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let x = solve_checked(a, &DMatrix::from_column_slice(b.len(), 1, b.as_slice()))?;
    Ok(x.column(0).into_owned())
}

pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    sv.max() / sv.min()
}

/// Least squares `y ≈ x * coef + 1 * intercept^T`. Returns `(coef, intercept)`
/// with `coef` of shape `(x.ncols, y.ncols)`.
pub fn lstsq_with_intercept(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(CirrlError::Shape(format!("{} design rows vs {} response rows", n, y.nrows())));
    }
    if n <= x.ncols() {
        return Err(CirrlError::RankDeficient {
            sigma_min: 0.0,
            sigma_max: 0.0,
        });
    }
    let xm = x.row_mean();
    let ym = y.row_mean();
    let xc = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - xm[j]);
    let yc = DMatrix::from_fn(n, y.ncols(), |i, j| y[(i, j)] - ym[j]);
    let gram = xc.transpose() * &xc;
    let cross = xc.transpose() * &yc;
    let coef = solve_checked(&gram, &cross)?;
    let intercept = DVector::from_iterator(y.ncols(), (0..y.ncols()).map(|j| ym[j] - (xm.clone() * coef.column(j))[(0, 0)]));
    Ok((coef, intercept))
}

pub fn to_dmatrix(m: &DenseMatrix) -> DMatrix<f64> {
    m.to_nalgebra()
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::from_nalgebra(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_sqrt_squares_back() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 0.7]);
        let r = psd_sqrt(&a);
        assert!((&r * &r - &a).amax() < 1e-12);
    }

    #[test]
    fn singular_system_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(matches!(solve_checked(&a, &b), Err(CirrlError::RankDeficient { .. })));
    }

    #[test]
    fn intercept_regression_recovers_affine_map() {
        let x = DMatrix::from_fn(20, 2, |i, j| ((i * 3 + j * 7) % 11) as f64 + 0.1 * j as f64);
        let y = DMatrix::from_fn(20, 1, |i, _| 2.0 * x[(i, 0)] - x[(i, 1)] + 3.0);
        let (coef, icpt) = lstsq_with_intercept(&x, &y).unwrap();
        assert!((coef[(0, 0)] - 2.0).abs() < 1e-10);
        assert!((coef[(1, 0)] + 1.0).abs() < 1e-10);
        assert!((icpt[0] - 3.0).abs() < 1e-9);
    }
}
