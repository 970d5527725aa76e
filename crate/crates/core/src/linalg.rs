//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Thin SVD with singular values sorted in nonincreasing order.
#[derive(Debug, Clone)]
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn svd(m: &DMatrix<f64>) -> Result<SortedSvd> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        let k = 0;
        return Ok(SortedSvd {
            u: DMatrix::zeros(rows, k),
            singular_values: DVector::zeros(k),
            v_t: DMatrix::zeros(k, cols),
        });
    }
    let mut dec = m
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or(Error::SvdFailed)?;
    dec.sort_by_singular_values();
    Ok(SortedSvd {
        u: dec.u.ok_or(Error::SvdFailed)?,
        singular_values: dec.singular_values,
        v_t: dec.v_t.ok_or(Error::SvdFailed)?,
    })
}

pub fn singular_values(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut sv = m
        .clone()
        .try_svd(false, false, f64::EPSILON, 0)
        .ok_or(Error::SvdFailed)?
        .singular_values;
    sv.as_mut_slice()
        .sort_unstable_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Ok(sv)
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.sum())
}

pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.iter().copied().fold(0.0, f64::max))
}

/// Number of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> Result<usize> {
    let sv = singular_values(m)?;
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * max).count())
}

/// Moore-Penrose pseudoinverse discarding singular values below
/// `rel_tol * sigma_max`. Returns the inverse and the retained rank.
pub fn pseudo_inverse(m: &DMatrix<f64>, rel_tol: f64) -> Result<(DMatrix<f64>, usize)> {
    let dec = svd(m)?;
    let max = dec.singular_values.iter().copied().fold(0.0, f64::max);
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    let mut rank = 0;
    for (i, &s) in dec.singular_values.iter().enumerate() {
        if max > 0.0 && s > rel_tol * max {
            rank += 1;
            let v = dec.v_t.row(i).transpose();
            let u = dec.u.column(i);
            out += (v / s) * u.transpose();
        }
    }
    Ok((out, rank))
}

/// Minimum-norm least-squares solution of `a * x = b` with a relative
/// rank cutoff. Returns the solution and whether `a` was rank deficient.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>, rel_tol: f64) -> Result<(DMatrix<f64>, bool)> {
    let (pinv, rank) = pseudo_inverse(a, rel_tol)?;
    Ok((pinv * b, rank < a.ncols()))
}

/// Symmetric function of a symmetric matrix via its eigendecomposition.
pub fn sym_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(f);
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Trace inner product `<a, b> = sum_ij a_ij b_ij`.
pub fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}
