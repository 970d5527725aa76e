//! Shutoff values of the two penalties.
//!
//! Above `lambda_sparse_max = 2 max |y_meas|` the outlier estimate vanishes.
//! Above `lambda_nuc_max` the nuclear term is inactive: `G(y_hat) = 0`. When
//! `G` is injective that means `y_hat = 0`. Otherwise (output sequences in
//! the span of the window inputs are annihilated by the projection) `y_hat`
//! is the Huber fit restricted to `ker G`, called the shutoff point.
//! `lambda_nuc_max` is the smallest spectral norm of a dual matrix `W` with
//! `G*(W) = g`, where `g` is the negated Huber gradient at the shutoff point.
//! The constraint is imposed on every sample of the window.
//!
//! The spectral-norm problem is solved by a splitting between a spectral-norm
//! prox and the projection onto the affine constraint set. Every feasible `W`
//! gives an upper bound and every `x` gives the lower bound
//! `<g, x> / ||G(x)||_*`, so the returned value carries a duality gap.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hankel::{GOperator, IoRecord};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PenaltyBounds {
    pub lambda_sparse_max: f64,
    pub lambda_nuc_max: f64,
    /// `lambda_sparse` at which `lambda_nuc_max` was evaluated.
    pub lambda_sparse_used: f64,
}

/// Optimal dual matrix for the nuclear-side shutoff.
#[derive(Debug, Clone)]
pub struct DualCertificate {
    /// Upper bound: `||w||_2` for the best feasible `w` found.
    pub value: f64,
    /// Lower bound from the dual side.
    pub lower_bound: f64,
    pub w: DMatrix<f64>,
    /// `max |G*(w) - g|`.
    pub constraint_residual: f64,
    pub iterations: usize,
    /// Output estimate at the shutoff, zero when `G` is injective.
    pub shutoff: DMatrix<f64>,
    /// Dimension of `ker G`.
    pub kernel_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CertificateOptions {
    pub rel_gap: f64,
    pub max_iter: usize,
}

impl Default for CertificateOptions {
    fn default() -> Self {
        Self {
            rel_gap: 1e-6,
            max_iter: 100_000,
        }
    }
}

/// `2 * max |y_meas|` over observed samples and all channels.
pub fn lambda_sparse_max(y_meas: &DMatrix<f64>, observed: &[bool]) -> Result<f64> {
    if observed.len() != y_meas.ncols() {
        return Err(Error::ShapeMismatch("mask length differs from sample count".into()));
    }
    let mut any = false;
    let mut max = 0.0_f64;
    for (k, _) in observed.iter().enumerate().filter(|(_, &o)| o) {
        any = true;
        for v in y_meas.column(k).iter() {
            max = max.max(v.abs());
        }
    }
    if !any {
        return Err(Error::Degenerate("no observed samples".into()));
    }
    Ok(2.0 * max)
}

/// Gradient of the Huber fit `sum H(y - y_meas)` at `y = 0`, negated:
/// `2 y_meas` on the quadratic branch, `lambda sign(y_meas)` on the linear
/// branch, zero on unobserved samples.
pub fn huber_gradient_at_zero(y_meas: &DMatrix<f64>, observed: &[bool], lambda_sparse: f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(y_meas.nrows(), y_meas.ncols());
    for (k, _) in observed.iter().enumerate().filter(|(_, &o)| o) {
        for c in 0..y_meas.nrows() {
            let v = y_meas[(c, k)];
            g[(c, k)] = if v.abs() <= lambda_sparse / 2.0 {
                2.0 * v
            } else {
                lambda_sparse * v.signum()
            };
        }
    }
    g
}

fn huber_sum(r: &DVector<f64>, lambda: f64) -> f64 {
    r.iter()
        .map(|&x| {
            if x.abs() <= lambda / 2.0 {
                x * x
            } else {
                lambda * x.abs() - lambda * lambda / 4.0
            }
        })
        .sum()
}

/// Minimizes `sum_observed H(y - y_meas)` over `y = K a`. Iteratively
/// reweighted least squares, then active-set Newton steps on the piecewise
/// quadratic.
pub(crate) fn huber_fit_on_subspace(
    basis: &DMatrix<f64>,
    y_meas: &DMatrix<f64>,
    observed: &[bool],
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let n_p = y_meas.nrows();
    let shape = y_meas.shape();
    if basis.ncols() == 0 {
        return Ok(DMatrix::zeros(shape.0, shape.1));
    }
    let rows: Vec<usize> = (0..basis.nrows()).filter(|&i| observed[i / n_p]).collect();
    let k = basis.select_rows(&rows);
    let m = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y_meas.as_slice()[i]));
    if k.nrows() == 0 {
        return Ok(DMatrix::zeros(shape.0, shape.1));
    }
    let f = |a: &DVector<f64>| huber_sum(&(&k * a - &m), lambda);

    let mut a = linalg::lstsq(&k, &DMatrix::from_column_slice(m.len(), 1, m.as_slice()), 1e-12)?
        .0
        .column(0)
        .into_owned();
    if lambda.is_finite() {
        for _ in 0..5000 {
            let r = &k * &a - &m;
            let w = r.map(|x| if x.abs() <= lambda / 2.0 { 1.0 } else { lambda / (2.0 * x.abs()) });
            let kw = DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| k[(i, j)] * w[i]);
            let (pinv, _) = linalg::pseudo_inverse(&(kw.transpose() * &k), 1e-12)?;
            let next = pinv * (kw.transpose() * &m);
            let delta = (&next - &a).norm();
            a = next;
            if delta <= 1e-13 * (1.0 + a.norm()) {
                break;
            }
        }
    }
    let mut partition: Vec<i8> = Vec::new();
    for _ in 0..100 {
        let r = &k * &a - &m;
        let part: Vec<i8> = r
            .iter()
            .map(|&x| if x.abs() <= lambda / 2.0 { 0 } else { x.signum() as i8 })
            .collect();
        if part == partition {
            break;
        }
        let quad: Vec<usize> = (0..part.len()).filter(|&i| part[i] == 0).collect();
        let mut rhs = DVector::zeros(k.ncols());
        for (i, &p) in part.iter().enumerate() {
            if p != 0 {
                rhs -= k.row(i).transpose() * (lambda / 2.0 * f64::from(p));
            }
        }
        let kq = k.select_rows(&quad);
        let mq = DVector::from_iterator(quad.len(), quad.iter().map(|&i| m[i]));
        rhs += kq.transpose() * mq;
        let normal = kq.transpose() * &kq;
        let (pinv, _) = linalg::pseudo_inverse(&normal, 1e-12)?;
        let target = pinv * rhs;
        let f0 = f(&a);
        let mut step = 1.0;
        let mut next = target.clone();
        while f(&next) > f0 && step > 1e-12 {
            step *= 0.5;
            next = &a + (&target - &a) * step;
        }
        if f(&next) > f0 {
            break;
        }
        a = next;
        partition = part;
    }
    let y = basis * a;
    Ok(DMatrix::from_column_slice(shape.0, shape.1, y.as_slice()))
}

/// Output estimate at the nuclear-side shutoff and the dimension of `ker G`.
pub fn shutoff_point(
    op: &GOperator,
    y_meas: &DMatrix<f64>,
    observed: &[bool],
    lambda_sparse: f64,
) -> Result<(DMatrix<f64>, usize)> {
    check_shapes(op, y_meas, observed)?;
    let basis = &op.gram_split().kernel;
    let y = huber_fit_on_subspace(basis, &masked(y_meas, observed), observed, lambda_sparse)?;
    Ok((y, basis.ncols()))
}

pub(crate) fn masked(y_meas: &DMatrix<f64>, observed: &[bool]) -> DMatrix<f64> {
    let mut y = y_meas.clone();
    for (k, _) in observed.iter().enumerate().filter(|(_, &o)| !o) {
        y.column_mut(k).fill(0.0);
    }
    y
}

fn check_shapes(op: &GOperator, y_meas: &DMatrix<f64>, observed: &[bool]) -> Result<()> {
    if y_meas.shape() != (op.n_p(), op.window_len()) || observed.len() != op.window_len() {
        return Err(Error::ShapeMismatch(format!(
            "y_meas {:?} does not match operator window {:?}",
            y_meas.shape(),
            (op.n_p(), op.window_len())
        )));
    }
    Ok(())
}

/// Projection onto `{W : G*(W) = g}` using the pseudoinverse of `G* G`.
pub(crate) struct AffineSet<'a> {
    op: &'a GOperator,
    gram_pinv: &'a DMatrix<f64>,
    g: DMatrix<f64>,
}

impl<'a> AffineSet<'a> {
    pub(crate) fn new(op: &'a GOperator, gram_pinv: &'a DMatrix<f64>, g: DMatrix<f64>) -> Self {
        Self { op, gram_pinv, g }
    }

    fn solve_gram(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let x = self.gram_pinv * DVector::from_column_slice(rhs.as_slice());
        DMatrix::from_column_slice(rhs.nrows(), rhs.ncols(), x.as_slice())
    }

    pub(crate) fn project(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let defect = self.op.adjoint(m)? - &self.g;
        let x = self.solve_gram(&defect);
        Ok(m - self.op.apply(&x)?)
    }

    pub(crate) fn residual(&self, w: &DMatrix<f64>) -> Result<f64> {
        Ok(linalg::max_abs(&(self.op.adjoint(w)? - &self.g)))
    }
}

/// Prox of `tau * ||.||_2`: singular values are capped at the level `c`
/// with `sum (sigma - c)_+ = tau`.
fn spectral_prox(m: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    let dec = linalg::svd(m)?;
    let s = dec.singular_values.as_slice();
    let total: f64 = s.iter().sum();
    if total <= tau {
        return Ok(DMatrix::zeros(m.nrows(), m.ncols()));
    }
    // s is nonincreasing; find the cap
    let mut cap = 0.0;
    let mut prefix = 0.0;
    for k in 0..s.len() {
        prefix += s[k];
        let c = (prefix - tau) / (k + 1) as f64;
        let next = s.get(k + 1).copied().unwrap_or(0.0);
        if c >= next {
            cap = c;
            break;
        }
    }
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, &sv) in s.iter().enumerate() {
        let v = sv.min(cap);
        if v > 0.0 {
            out += dec.u.column(i) * (dec.v_t.row(i) * v);
        }
    }
    Ok(out)
}

/// Minimum-spectral-norm dual matrix for the nuclear-side shutoff.
pub fn dual_certificate(
    op: &GOperator,
    y_meas: &DMatrix<f64>,
    observed: &[bool],
    lambda_sparse: f64,
    opts: CertificateOptions,
) -> Result<DualCertificate> {
    check_shapes(op, y_meas, observed)?;
    let split = op.gram_split();
    let kernel_dim = split.kernel.ncols();
    let y_meas = masked(y_meas, observed);
    let shutoff = huber_fit_on_subspace(&split.kernel, &y_meas, observed, lambda_sparse)?;
    let g = huber_gradient_at_zero(&(&y_meas - &shutoff), observed, lambda_sparse);
    let shape = op.output_shape();
    let g_scale = linalg::max_abs(&g);
    if g_scale == 0.0 {
        return Ok(DualCertificate {
            value: 0.0,
            lower_bound: 0.0,
            w: DMatrix::zeros(shape.0, shape.1),
            constraint_residual: 0.0,
            iterations: 0,
            shutoff,
            kernel_dim,
        });
    }

    let set = AffineSet::new(op, &split.pinv, g);
    let w0 = set.project(&DMatrix::zeros(shape.0, shape.1))?;
    let residual = set.residual(&w0)?;
    if residual > 1e-8 * g_scale {
        return Err(Error::DualCertificateInfeasible { residual });
    }

    let mut best_w = w0.clone();
    let mut upper = linalg::spectral_norm(&w0)?;
    let mut lower = 0.0_f64;
    let mut w = w0;
    let mut u = DMatrix::zeros(shape.0, shape.1);
    // the scaled dual lives on the scale of the spectral-norm subgradient
    let mut rho = 1.0 / upper;
    let mut iterations = 0;

    for it in 1..=opts.max_iter {
        iterations = it;
        let x = spectral_prox(&(&w - &u), 1.0 / rho)?;
        let w_old = std::mem::replace(&mut w, set.project(&(&x + &u))?);
        let r = &x - &w;
        u += &r;

        if it % 10 == 0 || it == 1 {
            let value = linalg::spectral_norm(&w)?;
            if value < upper {
                upper = value;
                best_w.copy_from(&w);
            }
            // <g, y> = <W, G(y)> <= ||W||_2 ||G(y)||_* for feasible W; -rho * u
            // approaches an optimal G(y)
            let y = set.solve_gram(&op.adjoint(&u)?);
            let gy = op.apply(&y)?;
            let nuc = linalg::nuclear_norm(&gy)?;
            if nuc > 0.0 {
                lower = lower.max(linalg::inner(&set.g, &y).abs() / nuc);
            }
            if upper - lower <= opts.rel_gap * upper {
                break;
            }
            let primal = r.norm();
            let dual = rho * (&w - &w_old).norm();
            if primal > 10.0 * dual {
                rho *= 2.0;
                u /= 2.0;
            } else if dual > 10.0 * primal {
                rho /= 2.0;
                u *= 2.0;
            }
        }
    }

    let constraint_residual = set.residual(&best_w)?;
    Ok(DualCertificate {
        value: upper,
        lower_bound: lower,
        w: best_w,
        constraint_residual,
        iterations,
        shutoff,
        kernel_dim,
    })
}

/// Smallest `lambda_nuc` for which the shutoff point is optimal at the given
/// `lambda_sparse`.
pub fn lambda_nuc_max(op: &GOperator, y_meas: &DMatrix<f64>, observed: &[bool], lambda_sparse: f64) -> Result<f64> {
    Ok(dual_certificate(op, y_meas, observed, lambda_sparse, CertificateOptions::default())?.value)
}

/// Both shutoff values, with `lambda_nuc_max` evaluated at
/// `lambda_sparse = lambda_sparse_max`.
pub fn penalty_bounds(op: &GOperator, y_meas: &DMatrix<f64>, observed: &[bool]) -> Result<PenaltyBounds> {
    let lambda_sparse_max = lambda_sparse_max(y_meas, observed)?;
    let lambda_nuc_max = lambda_nuc_max(op, y_meas, observed, lambda_sparse_max)?;
    Ok(PenaltyBounds {
        lambda_sparse_max,
        lambda_nuc_max,
        lambda_sparse_used: lambda_sparse_max,
    })
}

/// [`penalty_bounds`] over the identification window of a raw record.
pub fn penalty_bounds_for_record(op: &GOperator, record: &IoRecord) -> Result<PenaltyBounds> {
    let window = record.window(op.params().s, op.window_len())?;
    penalty_bounds(op, window.outputs(), window.observed())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, v.len(), v)
    }

    #[test]
    fn sparse_max_examples() {
        assert_eq!(lambda_sparse_max(&row(&[1.0, -3.0, 2.0]), &[true; 3]).unwrap(), 6.0);
        assert_eq!(lambda_sparse_max(&row(&[0.0, 0.0]), &[true; 2]).unwrap(), 0.0);
        assert_eq!(lambda_sparse_max(&row(&[1.0, -3.0, 2.0]), &[true, false, true]).unwrap(), 4.0);
        assert!(lambda_sparse_max(&row(&[1.0]), &[false]).is_err());
    }

    #[test]
    fn sparse_max_is_positively_homogeneous() {
        let y = DMatrix::from_fn(2, 7, |c, k| ((c + 2 * k) as f64).sin());
        let base = lambda_sparse_max(&y, &[true; 7]).unwrap();
        for alpha in [0.5, 3.0, 17.25] {
            assert_eq!(lambda_sparse_max(&(&y * alpha), &[true; 7]).unwrap(), base * alpha);
        }
    }

    #[test]
    fn gradient_branches() {
        let g = huber_gradient_at_zero(&row(&[1.0, 3.0, -3.0, 5.0]), &[true, true, true, false], 4.0);
        assert_eq!(g, row(&[2.0, 4.0, -4.0, 0.0]));
        let g = huber_gradient_at_zero(&row(&[7.0]), &[true], f64::INFINITY);
        assert_eq!(g, row(&[14.0]));
    }

    #[test]
    fn spectral_prox_caps_singular_values() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 3.0, 1.0]));
        // cap c with (5 - c) + (3 - c) = 2 -> c = 3
        let out = spectral_prox(&m, 2.0).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 3.0, 1.0]));
        assert!((out - want).norm() < 1e-12);
        assert_eq!(spectral_prox(&m, 9.0).unwrap().norm(), 0.0);
    }

    #[test]
    fn zero_data_has_zero_bound() {
        let op = GOperator::from_b_map(2, 1, DMatrix::identity(3, 3));
        let y = DMatrix::zeros(1, op.window_len());
        let b = penalty_bounds(&op, &y, &vec![true; op.window_len()]).unwrap();
        assert_eq!((b.lambda_sparse_max, b.lambda_nuc_max), (0.0, 0.0));
    }

    #[test]
    fn kernel_directions_are_fitted_at_the_shutoff() {
        // B_map with a zero row: sample 0 never reaches G, so it spans ker G
        let mut b = DMatrix::identity(3, 3);
        b[(0, 0)] = 0.0;
        let op = GOperator::from_b_map(2, 1, b);
        let y = row(&[1.0, 0.0, 0.0, 0.0]);
        let cert = dual_certificate(&op, &y, &[true; 4], f64::INFINITY, CertificateOptions::default()).unwrap();
        assert_eq!(cert.kernel_dim, 1);
        assert!((&cert.shutoff - &y).amax() < 1e-12);
        assert_eq!(cert.value, 0.0);

        // sample 0 on the linear branch of the Huber fit
        let y = row(&[5.0, 1.0, 0.0, 0.0]);
        let (point, dim) = shutoff_point(&op, &y, &[true; 4], 2.0).unwrap();
        assert_eq!(dim, 1);
        assert!((point[(0, 0)] - 5.0).abs() < 1e-12);
        assert!(point.columns(1, 3).amax() < 1e-12);
    }

    #[test]
    fn huber_fit_matches_grid_search() {
        // one-dimensional subspace spanned by (1, 1, 1)/sqrt 3; data with one outlier
        let basis = DMatrix::from_element(3, 1, 1.0 / 3f64.sqrt());
        let y = row(&[1.0, 1.2, 9.0]);
        let lambda = 1.0;
        let fit = huber_fit_on_subspace(&basis, &y, &[true; 3], lambda).unwrap();
        let c = fit[(0, 0)];
        let cost = |c: f64| huber_sum(&DVector::from_iterator(3, y.iter().map(|v| c - v)), lambda);
        let best = (0..200_001)
            .map(|i| i as f64 * 1e-4 - 5.0)
            .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
            .unwrap();
        assert!(cost(c) <= cost(best) + 1e-12);
        assert!((c - best).abs() < 1e-3);
    }

    #[test]
    fn certificate_closes_the_gap() {
        let b = DMatrix::from_fn(5, 4, |i, j| ((1 + i * 4 + j) as f64 * 0.73).sin() + (((i * j) as f64) * 1.1).cos());
        let op = GOperator::from_b_map(2, 1, b);
        let y = DMatrix::from_fn(1, op.window_len(), |_, k| (k as f64 * 1.3).sin() * 2.0);
        let cert = dual_certificate(&op, &y, &vec![true; op.window_len()], 3.0, CertificateOptions::default())
            .unwrap();
        assert!(cert.value - cert.lower_bound <= 1e-6 * cert.value);
        let g = huber_gradient_at_zero(&y, &vec![true; op.window_len()], 3.0);
        assert!(cert.constraint_residual <= 1e-6 * linalg::max_abs(&g));
        assert!((linalg::spectral_norm(&cert.w).unwrap() - cert.value).abs() <= 1e-12 * cert.value);
    }
}
