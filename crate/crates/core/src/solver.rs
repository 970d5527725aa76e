//! Robust output filtering:
//!
//! ```text
//! min_{y,e} lambda_nuc ||G(y)||_* + sum_{k observed} ||y(k) - y_meas(k) - e(k)||^2
//!           + lambda_sparse sum_k ||e(k)||_1
//! ```
//!
//! Minimizing over `e` in closed form leaves a Huber fit in `y`. The solver
//! splits `Z = G(y)` and `w = y`, so each iteration is one prefactored linear
//! solve with `G* G + I`, a singular value threshold on `Z` and an elementwise
//! Huber prox on `w`. `lambda_sparse = +inf` fixes `e = 0` and recovers the
//! plain missing-data problem.

use nalgebra::{DMatrix, DVector};

use crate::bounds::{dual_certificate, huber_fit_on_subspace, huber_gradient_at_zero, AffineSet, CertificateOptions};
use crate::error::{Error, Result};
use crate::hankel::{GOperator, IoRecord};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Penalties {
    /// Weight on the nuclear norm of `G(y)`.
    pub lambda_nuc: f64,
    /// Weight on `||e||_1`; `f64::INFINITY` pins `e` to zero.
    pub lambda_sparse: f64,
}

impl Penalties {
    pub fn new(lambda_nuc: f64, lambda_sparse: f64) -> Result<Self> {
        let p = Self {
            lambda_nuc,
            lambda_sparse,
        };
        p.validate()?;
        Ok(p)
    }

    /// Missing-data problem without an outlier term.
    pub fn without_outliers(lambda_nuc: f64) -> Result<Self> {
        Self::new(lambda_nuc, f64::INFINITY)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_nuc >= 0.0 && self.lambda_nuc.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda_nuc must be finite and >= 0, got {}",
                self.lambda_nuc
            )));
        }
        if !(self.lambda_sparse >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda_sparse must be >= 0, got {}",
                self.lambda_sparse
            )));
        }
        Ok(())
    }
}

/// One instance of the filtering problem over an identification window.
#[derive(Debug, Clone)]
pub struct RobustProblem<'a> {
    op: &'a GOperator,
    y_meas: DMatrix<f64>,
    observed: Vec<bool>,
    penalties: Penalties,
}

impl<'a> RobustProblem<'a> {
    /// Unobserved entries of `y_meas` are never read; they may hold NaN.
    pub fn new(
        op: &'a GOperator,
        y_meas: &DMatrix<f64>,
        observed: &[bool],
        penalties: Penalties,
    ) -> Result<Self> {
        penalties.validate()?;
        let shape = (op.n_p(), op.window_len());
        if y_meas.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "y_meas is {:?}, operator expects {:?}",
                y_meas.shape(),
                shape
            )));
        }
        if observed.len() != shape.1 {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries, window has {}",
                observed.len(),
                shape.1
            )));
        }
        let mut clean = DMatrix::zeros(shape.0, shape.1);
        for (k, _) in observed.iter().enumerate().filter(|(_, &o)| o) {
            for c in 0..shape.0 {
                let v = y_meas[(c, k)];
                if !v.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "non-finite measurement at sample {k}, channel {c}"
                    )));
                }
                clean[(c, k)] = v;
            }
        }
        Ok(Self {
            op,
            y_meas: clean,
            observed: observed.to_vec(),
            penalties,
        })
    }

    /// Problem over the identification window of a raw record (samples
    /// `s .. s + N + r - 1`).
    pub fn from_record(op: &'a GOperator, record: &IoRecord, penalties: Penalties) -> Result<Self> {
        let window = record.window(op.params().s, op.window_len())?;
        Self::new(op, window.outputs(), window.observed(), penalties)
    }

    pub fn op(&self) -> &GOperator {
        self.op
    }

    /// Measurements with unobserved entries zeroed.
    pub fn y_meas(&self) -> &DMatrix<f64> {
        &self.y_meas
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn penalties(&self) -> Penalties {
        self.penalties
    }

    pub fn with_penalties(&self, penalties: Penalties) -> Result<Self> {
        penalties.validate()?;
        Ok(Self {
            penalties,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub max_iter: usize,
    pub tol_abs: f64,
    pub tol_rel: f64,
    /// Initial coupling weight.
    pub rho: f64,
    /// Rescale `rho` by 2 when one residual exceeds the other tenfold.
    pub adaptive_rho: bool,
    /// When the iterate reaches `G(y) = 0` or the iteration cap, try to
    /// certify the minimizer over `ker G` and return it exactly.
    pub polish: bool,
    /// Starting point; defaults to `y_meas` on observed samples, 0 elsewhere.
    #[serde(skip)]
    pub initial_y: Option<DMatrix<f64>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            tol_abs: 1e-6,
            tol_rel: 1e-4,
            rho: 1.0,
            adaptive_rho: true,
            polish: true,
            initial_y: None,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be >= 1".into()));
        }
        if !(self.tol_abs > 0.0 && self.tol_rel > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidParameter("rho must be positive".into()));
        }
        Ok(())
    }

    /// Tight tolerances for reference solutions and shutoff checks.
    pub fn precise() -> Self {
        Self {
            max_iter: 50_000,
            tol_abs: 1e-11,
            tol_rel: 1e-10,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub y_hat: DMatrix<f64>,
    /// Outlier estimates; zero on unobserved samples.
    pub e_hat: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
    pub rho: f64,
    /// The iterate was replaced by the exact minimizer over `ker G`, with a
    /// dual certificate of optimality.
    pub polished: bool,
}

impl SolveResult {
    /// `Err(NotConverged)` unless the stopping rule was met.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
                primal: self.primal_residual,
                dual: self.dual_residual,
            })
        }
    }
}

pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

/// `U * soft(Sigma, tau) * V^T`: the prox of `tau * ||.||_*`.
pub fn singular_value_threshold(m: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if tau == 0.0 {
        return Ok(m.clone());
    }
    let dec = linalg::svd(m)?;
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, &s) in dec.singular_values.iter().enumerate() {
        let shrunk = s - tau;
        if shrunk <= 0.0 {
            // sorted, nothing further survives
            break;
        }
        out += dec.u.column(i) * (dec.v_t.row(i) * shrunk);
    }
    Ok(out)
}

/// Huber function with kink at `lambda_sparse / 2`: `x^2` inside,
/// `lambda |x| - lambda^2 / 4` outside. Equals `min_e (x - e)^2 + lambda |e|`.
pub fn huber_value(x: f64, lambda_sparse: f64) -> f64 {
    let a = x.abs();
    if a <= lambda_sparse / 2.0 {
        x * x
    } else {
        lambda_sparse * a - lambda_sparse * lambda_sparse / 4.0
    }
}

/// Exact minimizer over `e` for fixed `y`: `soft(y - y_meas, lambda_sparse / 2)`
/// on observed samples, zero elsewhere.
pub fn eliminate_e(y: &DMatrix<f64>, problem: &RobustProblem<'_>) -> Result<DMatrix<f64>> {
    let ym = problem.y_meas();
    if y.shape() != ym.shape() {
        return Err(Error::ShapeMismatch(format!(
            "y is {:?}, y_meas is {:?}",
            y.shape(),
            ym.shape()
        )));
    }
    let tau = problem.penalties().lambda_sparse / 2.0;
    let mut e = DMatrix::zeros(ym.nrows(), ym.ncols());
    if tau.is_infinite() {
        return Ok(e);
    }
    for (k, _) in problem.observed().iter().enumerate().filter(|(_, &o)| o) {
        for c in 0..ym.nrows() {
            e[(c, k)] = soft_threshold(y[(c, k)] - ym[(c, k)], tau);
        }
    }
    Ok(e)
}

/// Exact objective with the nuclear norm from a full SVD.
pub fn objective_value(y: &DMatrix<f64>, e: &DMatrix<f64>, problem: &RobustProblem<'_>) -> Result<f64> {
    let ym = problem.y_meas();
    if y.shape() != ym.shape() || e.shape() != ym.shape() {
        return Err(Error::ShapeMismatch("y, e and y_meas must share a shape".into()));
    }
    let p = problem.penalties();
    let nuc = if p.lambda_nuc == 0.0 {
        0.0
    } else {
        p.lambda_nuc * linalg::nuclear_norm(&problem.op().apply(y)?)?
    };
    let mut fit = 0.0;
    let mut l1 = 0.0;
    for (k, _) in problem.observed().iter().enumerate().filter(|(_, &o)| o) {
        for c in 0..ym.nrows() {
            let r = y[(c, k)] - ym[(c, k)] - e[(c, k)];
            fit += r * r;
            l1 += e[(c, k)].abs();
        }
    }
    let sparse = if l1 == 0.0 { 0.0 } else { p.lambda_sparse * l1 };
    Ok(nuc + fit + sparse)
}

/// Prox of `w -> H(w - y_meas)` with weight `rho / 2` on the quadratic, for
/// one observed scalar. `v` is the prox center.
fn huber_prox(v: f64, y_meas: f64, lambda_sparse: f64, rho: f64) -> f64 {
    let q = v - y_meas;
    let e = if lambda_sparse.is_infinite() {
        0.0
    } else {
        soft_threshold(q, lambda_sparse * (2.0 + rho) / (2.0 * rho))
    };
    y_meas + (2.0 * e + rho * q) / (2.0 + rho)
}

/// Solves the robust filtering problem by operator splitting.
///
/// Non-convergence is not an error here: the result carries
/// `converged = false` and callers decide (see [`SolveResult::require_converged`]).
pub fn solve_robust(problem: &RobustProblem<'_>, opts: &SolveOptions) -> Result<SolveResult> {
    opts.validate()?;
    let op = problem.op();
    let ym = problem.y_meas();
    let (n_p, len) = ym.shape();
    let lam = problem.penalties();

    let factor = op.normal_factor().ok_or_else(|| {
        Error::Degenerate("normal matrix of the operator is not positive definite".into())
    })?;

    let mut y = match &opts.initial_y {
        Some(init) => {
            if init.shape() != (n_p, len) {
                return Err(Error::ShapeMismatch(format!(
                    "initial y is {:?}, expected {:?}",
                    init.shape(),
                    (n_p, len)
                )));
            }
            init.clone()
        }
        None => ym.clone(),
    };
    let mut z = op.apply(&y)?;
    let mut w = y.clone();
    let mut u1 = DMatrix::zeros(z.nrows(), z.ncols());
    let mut u2 = DMatrix::zeros(n_p, len);
    let mut rho = opts.rho;

    let mut primal = f64::INFINITY;
    let mut dual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=opts.max_iter {
        iterations = it;

        // y-update: (G*G + I) y = G*(Z - U1) + (w - U2)
        let rhs = op.adjoint(&(&z - &u1))? + (&w - &u2);
        let sol = factor.solve(&DVector::from_column_slice(rhs.as_slice()));
        y = DMatrix::from_column_slice(n_p, len, sol.as_slice());

        let gy = op.apply(&y)?;
        let z_old = std::mem::replace(&mut z, singular_value_threshold(&(&gy + &u1), lam.lambda_nuc / rho)?);
        let w_old = w.clone();
        for k in 0..len {
            for c in 0..n_p {
                let v = y[(c, k)] + u2[(c, k)];
                w[(c, k)] = if problem.observed()[k] {
                    huber_prox(v, ym[(c, k)], lam.lambda_sparse, rho)
                } else {
                    v
                };
            }
        }

        let r1 = &gy - &z;
        let r2 = &y - &w;
        u1 += &r1;
        u2 += &r2;

        primal = (r1.norm_squared() + r2.norm_squared()).sqrt();
        let dz = op.adjoint(&(&z - &z_old))? + (&w - &w_old);
        dual = rho * dz.norm();

        let scale_pri = (gy.norm_squared() + y.norm_squared())
            .sqrt()
            .max((z.norm_squared() + w.norm_squared()).sqrt());
        // G*(U1) + U2 vanishes at the optimum, so scale by the parts
        let scale_dual = rho * (op.adjoint(&u1)?.norm_squared() + u2.norm_squared()).sqrt();
        if primal <= opts.tol_abs + opts.tol_rel * scale_pri
            && dual <= opts.tol_abs + opts.tol_rel * scale_dual
        {
            converged = true;
            break;
        }

        if opts.adaptive_rho {
            if primal > 10.0 * dual {
                rho *= 2.0;
                u1 /= 2.0;
                u2 /= 2.0;
            } else if dual > 10.0 * primal {
                rho /= 2.0;
                u1 *= 2.0;
                u2 *= 2.0;
            }
        }
    }

    let mut polished = false;
    if opts.polish && lam.lambda_nuc > 0.0 && (!converged || z.iter().all(|&v| v == 0.0)) {
        if let Some(y_star) = certified_shutoff(problem, &y, &u1, rho)? {
            y = y_star;
            polished = true;
            converged = true;
        }
    }

    let e_hat = eliminate_e(&y, problem)?;
    let objective = objective_value(&y, &e_hat, problem)?;
    Ok(SolveResult {
        y_hat: y,
        e_hat,
        objective,
        iterations,
        primal_residual: primal,
        dual_residual: dual,
        converged,
        rho,
        polished,
    })
}

/// The minimizer of the Huber fit over `ker G` is optimal iff some `W` with
/// `||W||_2 <= 1` solves `G*(W) = g / lambda_nuc`, `g` the negated Huber
/// gradient there. The scaled multiplier `rho * U1 / lambda_nuc` projected
/// onto that affine set is tried first, then the minimum-norm certificate.
fn certified_shutoff(
    problem: &RobustProblem<'_>,
    y: &DMatrix<f64>,
    u1: &DMatrix<f64>,
    rho: f64,
) -> Result<Option<DMatrix<f64>>> {
    let op = problem.op();
    let lam = problem.penalties();
    let split = op.gram_split();
    let y_star = huber_fit_on_subspace(&split.kernel, problem.y_meas(), problem.observed(), lam.lambda_sparse)?;
    let g = huber_gradient_at_zero(&(problem.y_meas() - &y_star), problem.observed(), lam.lambda_sparse)
        / lam.lambda_nuc;
    let g_scale = linalg::max_abs(&g).max(1.0);
    let set = AffineSet::new(op, &split.pinv, g.clone());
    let w = set.project(&(u1 * (rho / lam.lambda_nuc)))?;
    if set.residual(&w)? <= 1e-9 * g_scale && linalg::spectral_norm(&w)? <= 1.0 + 1e-9 {
        return Ok(Some(y_star));
    }
    // any x gives ||W||_2 >= |<g, x>| / ||G(x)||_*; try the iterate's direction
    let x = y - &y_star;
    let xv = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    let xv = &xv - &split.kernel * (split.kernel.transpose() * &xv);
    let x = DMatrix::from_column_slice(x.nrows(), x.ncols(), xv.as_slice());
    let gx = linalg::nuclear_norm(&op.apply(&x)?)?;
    if gx > 0.0 && linalg::inner(&g, &x).abs() > (1.0 + 1e-6) * gx {
        return Ok(None);
    }
    let cert = match dual_certificate(
        op,
        problem.y_meas(),
        problem.observed(),
        lam.lambda_sparse,
        CertificateOptions::default(),
    ) {
        Ok(c) => c,
        Err(Error::DualCertificateInfeasible { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let g_scale = lam.lambda_nuc * g_scale;
    if cert.value <= lam.lambda_nuc && cert.constraint_residual <= 1e-8 * g_scale {
        Ok(Some(cert.shutoff))
    } else {
        Ok(None)
    }
}
