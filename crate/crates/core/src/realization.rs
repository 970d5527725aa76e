//! From filtered outputs to a state-space model.
//!
//! The SVD of `G(y_hat)` gives a basis `P` for the range of the extended
//! observability matrix. `C` is its top block row and `A` solves the shift
//! equations between consecutive block rows. With `(A, C)` fixed the output
//! is affine in `(x0, B, D)`, which are fitted by linear least squares.
//! Recovered matrices are only defined up to a state similarity transform.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hankel::{build_g_operator, GOperator, HankelParams, IoRecord};
use crate::linalg;
use crate::solver::{solve_robust, Penalties, RobustProblem, SolveOptions, SolveResult};

/// Relative rank cutoff for the least-squares fits.
const LSTSQ_RANK_TOL: f64 = 1e-12;

/// `x(k+1) = A x(k) + B u(k)`, `y(k) = C x(k) + D u(k)`, starting at `x0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub x0: DVector<f64>,
}

impl StateSpaceModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let n_x = a.nrows();
        let (n_p, n_m) = d.shape();
        let ok = a.ncols() == n_x
            && b.shape() == (n_x, n_m)
            && c.shape() == (n_p, n_x)
            && x0.len() == n_x;
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "inconsistent model: A {:?}, B {:?}, C {:?}, D {:?}, x0 {}",
                a.shape(),
                b.shape(),
                c.shape(),
                d.shape(),
                x0.len()
            )));
        }
        Ok(Self { a, b, c, d, x0 })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_m(&self) -> usize {
        self.d.ncols()
    }

    pub fn n_p(&self) -> usize {
        self.d.nrows()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRepr {
    n_x: usize,
    n_m: usize,
    n_p: usize,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    d: Vec<Vec<f64>>,
    x0: Vec<f64>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::ShapeMismatch(format!("{name} must be {nrows} x {ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl From<StateSpaceModel> for ModelRepr {
    fn from(m: StateSpaceModel) -> Self {
        Self {
            n_x: m.n_x(),
            n_m: m.n_m(),
            n_p: m.n_p(),
            a: to_rows(&m.a),
            b: to_rows(&m.b),
            c: to_rows(&m.c),
            d: to_rows(&m.d),
            x0: m.x0.iter().copied().collect(),
        }
    }
}

impl TryFrom<ModelRepr> for StateSpaceModel {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        StateSpaceModel::new(
            from_rows(&r.a, r.n_x, r.n_x, "A")?,
            from_rows(&r.b, r.n_x, r.n_m, "B")?,
            from_rows(&r.c, r.n_p, r.n_x, "C")?,
            from_rows(&r.d, r.n_p, r.n_m, "D")?,
            DVector::from_vec(r.x0),
        )
    }
}

/// Truncated SVD of `G(y_hat)`.
#[derive(Debug, Clone)]
pub struct SvdSplit {
    pub p: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub q: DMatrix<f64>,
    pub sigma_tail: Vec<f64>,
}

impl SvdSplit {
    pub fn new(g_hat: &DMatrix<f64>, policy: OrderPolicy) -> Result<Self> {
        let dec = linalg::svd(g_hat)?;
        let sv: Vec<f64> = dec.singular_values.iter().copied().collect();
        let n_x = select_order(&sv, policy)?;
        Ok(Self {
            p: dec.u.columns(0, n_x).into_owned(),
            sigma: sv[..n_x].to_vec(),
            q: dec.v_t.rows(0, n_x).transpose(),
            sigma_tail: sv[n_x..].to_vec(),
        })
    }

    pub fn order(&self) -> usize {
        self.sigma.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrderPolicy {
    /// Largest ratio between consecutive significant singular values.
    Gap,
    Fixed(usize),
    /// Count singular values above `tau * sigma_1`.
    Threshold(f64),
}

impl Default for OrderPolicy {
    fn default() -> Self {
        Self::Gap
    }
}

impl fmt::Display for OrderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gap => write!(f, "gap"),
            Self::Fixed(n) => write!(f, "fixed:{n}"),
            Self::Threshold(t) => write!(f, "threshold:{t}"),
        }
    }
}

impl FromStr for OrderPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("unknown order policy '{s}'"));
        match s.split_once(':') {
            None if s == "gap" => Ok(Self::Gap),
            Some(("fixed", n)) => n.parse().map(Self::Fixed).map_err(|_| bad()),
            Some(("threshold", t)) => t.parse().map(Self::Threshold).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl Serialize for OrderPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for OrderPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Values below this fraction of `sigma_1` are treated as exact zeros.
const GAP_FLOOR: f64 = 1e-12;
/// A spectrum whose largest consecutive ratio stays below this is ambiguous.
const GAP_MIN_RATIO: f64 = 1.0 + 1e-8;

/// Model order from a nonincreasing singular value sequence.
pub fn select_order(singular_values: &[f64], policy: OrderPolicy) -> Result<usize> {
    if singular_values.is_empty() {
        return Err(Error::InvalidParameter("no singular values".into()));
    }
    if singular_values.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::InvalidParameter("singular values must be nonnegative".into()));
    }
    let first = singular_values[0];
    match policy {
        OrderPolicy::Fixed(n) => {
            if n > singular_values.len() {
                return Err(Error::InvalidParameter(format!(
                    "order {n} exceeds {} available singular values",
                    singular_values.len()
                )));
            }
            Ok(n)
        }
        OrderPolicy::Threshold(tau) => Ok(singular_values.iter().filter(|&&s| s > tau * first).count()),
        OrderPolicy::Gap => {
            if first == 0.0 {
                return Ok(0);
            }
            let significant = singular_values
                .iter()
                .take_while(|&&s| s > GAP_FLOOR * first)
                .count();
            if significant < singular_values.len() {
                // the drop below the floor is an infinite gap
                return Ok(significant);
            }
            let mut best = (0.0, 0);
            for i in 0..significant - 1 {
                let ratio = singular_values[i] / singular_values[i + 1];
                if ratio > best.0 {
                    best = (ratio, i + 1);
                }
            }
            if best.0 < GAP_MIN_RATIO {
                return Err(Error::NoSignificantGap);
            }
            Ok(best.1)
        }
    }
}

/// `G(y_hat)`; the same map as [`GOperator::apply`].
pub fn estimate_g_hat(y_hat: &DMatrix<f64>, op: &GOperator) -> Result<DMatrix<f64>> {
    op.apply(y_hat)
}

#[derive(Debug, Clone)]
pub struct AcEstimate {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub rank_deficient: bool,
    /// Frobenius norm of the shift-equation residual.
    pub residual: f64,
}

/// `C` is the top block row of the basis, `A` the least-squares solution of
/// `V_i = V_{i-1} A` over `i = 1..r-1`.
pub fn estimate_ac(v_basis: &DMatrix<f64>, r: usize, n_p: usize) -> Result<AcEstimate> {
    if r < 2 {
        return Err(Error::InvalidParameter("need r >= 2 for the shift equations".into()));
    }
    if v_basis.nrows() != r * n_p {
        return Err(Error::ShapeMismatch(format!(
            "basis has {} rows, expected r * n_p = {}",
            v_basis.nrows(),
            r * n_p
        )));
    }
    let n_x = v_basis.ncols();
    let c = v_basis.rows(0, n_p).into_owned();
    if n_x == 0 {
        return Ok(AcEstimate {
            a: DMatrix::zeros(0, 0),
            c,
            rank_deficient: false,
            residual: 0.0,
        });
    }
    let upper = v_basis.rows(0, (r - 1) * n_p).into_owned();
    let lower = v_basis.rows(n_p, (r - 1) * n_p).into_owned();
    let (a, rank_deficient) = linalg::lstsq(&upper, &lower, LSTSQ_RANK_TOL)?;
    let residual = (&upper * &a - &lower).norm();
    Ok(AcEstimate {
        a,
        c,
        rank_deficient,
        residual,
    })
}

#[derive(Debug, Clone)]
pub struct BdEstimate {
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub rank_deficient: bool,
    /// Sum of squared output residuals over observed samples.
    pub residual: f64,
}

/// Fits `(B, D, x0)` to the record's outputs with `(A, C)` fixed.
///
/// The output is affine in the stacked parameter `[x0; vec(B); vec(D)]`, so
/// each regressor column is the simulated response to one unit parameter.
pub fn estimate_bd_x0(a: &DMatrix<f64>, c: &DMatrix<f64>, record: &IoRecord) -> Result<BdEstimate> {
    let n_x = a.nrows();
    let n_p = record.n_outputs();
    let n_m = record.n_inputs();
    if a.ncols() != n_x || c.shape() != (n_p, n_x) {
        return Err(Error::ShapeMismatch(format!(
            "A {:?} and C {:?} inconsistent with {n_p} outputs",
            a.shape(),
            c.shape()
        )));
    }
    if record.is_empty() {
        return Err(Error::Degenerate("empty record".into()));
    }
    let rows: Vec<usize> = record.observed_indices();
    let n_params = n_x + n_x * n_m + n_p * n_m;
    let mut regressor = DMatrix::zeros(rows.len() * n_p, n_params);
    let mut target = DMatrix::zeros(rows.len() * n_p, 1);
    for (i, &k) in rows.iter().enumerate() {
        for ch in 0..n_p {
            target[(i * n_p + ch, 0)] = record.outputs()[(ch, k)];
        }
    }

    let u = record.inputs();
    let zero_model = || StateSpaceModel {
        a: a.clone(),
        b: DMatrix::zeros(n_x, n_m),
        c: c.clone(),
        d: DMatrix::zeros(n_p, n_m),
        x0: DVector::zeros(n_x),
    };
    let mut fill = |col: usize, model: &StateSpaceModel| {
        let y = simulate(model, u);
        for (i, &k) in rows.iter().enumerate() {
            for ch in 0..n_p {
                regressor[(i * n_p + ch, col)] = y[(ch, k)];
            }
        }
    };
    let mut col = 0;
    for j in 0..n_x {
        let mut m = zero_model();
        m.x0[j] = 1.0;
        fill(col, &m);
        col += 1;
    }
    for jm in 0..n_m {
        for jx in 0..n_x {
            let mut m = zero_model();
            m.b[(jx, jm)] = 1.0;
            fill(col, &m);
            col += 1;
        }
    }
    for jm in 0..n_m {
        for jp in 0..n_p {
            let mut m = zero_model();
            m.d[(jp, jm)] = 1.0;
            fill(col, &m);
            col += 1;
        }
    }

    let (theta, rank_deficient) = linalg::lstsq(&regressor, &target, LSTSQ_RANK_TOL)?;
    let residual = (&regressor * &theta - &target).norm_squared();
    let theta = theta.column(0);
    let x0 = DVector::from_iterator(n_x, theta.rows(0, n_x).iter().copied());
    let b = DMatrix::from_column_slice(n_x, n_m, theta.rows(n_x, n_x * n_m).as_slice());
    let d = DMatrix::from_column_slice(n_p, n_m, theta.rows(n_x + n_x * n_m, n_p * n_m).as_slice());
    Ok(BdEstimate {
        b,
        d,
        x0,
        rank_deficient,
        residual,
    })
}

/// Deterministic simulation from `model.x0`; `u` is `n_m x T`.
pub fn simulate(model: &StateSpaceModel, u: &DMatrix<f64>) -> DMatrix<f64> {
    let steps = u.ncols();
    let mut y = DMatrix::zeros(model.n_p(), steps);
    let mut x = model.x0.clone();
    for k in 0..steps {
        let uk = u.column(k);
        let yk = &model.c * &x + &model.d * uk;
        y.set_column(k, &yk);
        x = &model.a * &x + &model.b * uk;
    }
    y
}

/// Checks the input dimension before simulating.
pub fn simulate_checked(model: &StateSpaceModel, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if u.nrows() != model.n_m() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} inputs, data has {}",
            model.n_m(),
            u.nrows()
        )));
    }
    Ok(simulate(model, u))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyOptions {
    pub solver: SolveOptions,
    pub order: OrderPolicy,
}

/// Everything produced by one pass of the pipeline.
#[derive(Debug, Clone)]
pub struct Identified {
    pub model: StateSpaceModel,
    pub solve: SolveResult,
    pub split: SvdSplit,
    /// Minimum-norm solutions were used somewhere in the realization.
    pub rank_warning: bool,
}

/// Filters, realizes and fits a model on the identification window of a raw
/// record. The model's initial state refers to window time 0 (raw sample `s`).
pub fn identify(
    record: &IoRecord,
    params: &HankelParams,
    penalties: Penalties,
    opts: &IdentifyOptions,
) -> Result<Identified> {
    if record.is_empty() {
        return Err(Error::Degenerate("empty record".into()));
    }
    let op = build_g_operator(record, params)?;
    identify_with_operator(&op, record, penalties, opts)
}

/// [`identify`] with a prebuilt operator, for surveys over many penalties.
pub fn identify_with_operator(
    op: &GOperator,
    record: &IoRecord,
    penalties: Penalties,
    opts: &IdentifyOptions,
) -> Result<Identified> {
    let problem = RobustProblem::from_record(op, record, penalties)?;
    let solve = solve_robust(&problem, &opts.solver)?.require_converged()?;
    realize(op, record, solve, opts.order)
}

/// Realization half of the pipeline, from an already solved filter.
pub fn realize(op: &GOperator, record: &IoRecord, solve: SolveResult, order: OrderPolicy) -> Result<Identified> {
    let g_hat = estimate_g_hat(&solve.y_hat, op)?;
    let split = SvdSplit::new(&g_hat, order)?;
    let ac = estimate_ac(&split.p, op.r(), op.n_p())?;
    let window = record.window(op.params().s, op.window_len())?;
    let filtered = IoRecord::fully_observed(window.inputs().clone(), solve.y_hat.clone())?;
    let bd = estimate_bd_x0(&ac.a, &ac.c, &filtered)?;
    let model = StateSpaceModel::new(ac.a, bd.b, ac.c, bd.d, bd.x0)?;
    Ok(Identified {
        model,
        solve,
        split,
        rank_warning: ac.rank_deficient || bd.rank_deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_policies() {
        assert_eq!(select_order(&[10.0, 9.0, 1e-9], OrderPolicy::Gap).unwrap(), 2);
        assert_eq!(select_order(&[5.0, 4.0, 3.0], OrderPolicy::Fixed(2)).unwrap(), 2);
        assert!(select_order(&[5.0, 4.0, 3.0], OrderPolicy::Fixed(4)).is_err());
        assert!(matches!(
            select_order(&[2.0, 2.0, 2.0], OrderPolicy::Gap),
            Err(Error::NoSignificantGap)
        ));
        assert_eq!(select_order(&[8.0, 1.0, 0.5], OrderPolicy::Threshold(0.1)).unwrap(), 2);
        assert_eq!(select_order(&[3.0, 1.0, 0.0, 0.0], OrderPolicy::Gap).unwrap(), 2);
        assert_eq!(select_order(&[0.0, 0.0], OrderPolicy::Gap).unwrap(), 0);
        assert!(select_order(&[], OrderPolicy::Gap).is_err());
    }

    #[test]
    fn order_policy_parsing() {
        assert_eq!("gap".parse::<OrderPolicy>().unwrap(), OrderPolicy::Gap);
        assert_eq!("fixed:3".parse::<OrderPolicy>().unwrap(), OrderPolicy::Fixed(3));
        assert_eq!("threshold:0.01".parse::<OrderPolicy>().unwrap(), OrderPolicy::Threshold(0.01));
        assert!("fixed:x".parse::<OrderPolicy>().is_err());
        assert!("knee".parse::<OrderPolicy>().is_err());
    }

    #[test]
    fn ac_from_exact_observability_matrix() {
        // A = diag(0.9, 0.5), C = [1 1], r = 4: O_r rows are [0.9^k, 0.5^k]
        let r = 4;
        let o = DMatrix::from_fn(r, 2, |k, j| if j == 0 { 0.9_f64.powi(k as i32) } else { 0.5_f64.powi(k as i32) });
        let est = estimate_ac(&o, r, 1).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.5]);
        assert!((est.a - a).amax() < 1e-10);
        assert!((est.c - DMatrix::from_row_slice(1, 2, &[1.0, 1.0])).amax() < 1e-10);
        assert!(est.residual < 1e-10);
        assert!(!est.rank_deficient);
    }

    #[test]
    fn ac_edge_cases() {
        let est = estimate_ac(&DMatrix::zeros(6, 0), 3, 2).unwrap();
        assert_eq!(est.a.shape(), (0, 0));
        assert_eq!(est.c.shape(), (2, 0));
        assert!(estimate_ac(&DMatrix::zeros(2, 1), 1, 2).is_err());
        assert!(estimate_ac(&DMatrix::zeros(5, 1), 3, 2).is_err());
    }

    #[test]
    fn simulate_examples() {
        let u = DMatrix::from_fn(2, 4, |i, k| (i * 4 + k) as f64);
        let echo = StateSpaceModel::new(
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DVector::zeros(1),
        )
        .unwrap();
        assert_eq!(simulate(&echo, &u), u);

        let m = StateSpaceModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
        )
        .unwrap();
        let y = simulate(&m, &DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]));
        assert_eq!(y, DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.5]));
        assert!(simulate_checked(&m, &u).is_err());
    }

    #[test]
    fn bd_zero_data_gives_zero_parameters() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let rec = IoRecord::fully_observed(DMatrix::zeros(1, 10), DMatrix::zeros(1, 10)).unwrap();
        let est = estimate_bd_x0(&a, &c, &rec).unwrap();
        assert_eq!(est.b.norm(), 0.0);
        assert_eq!(est.d.norm(), 0.0);
        assert_eq!(est.x0.norm(), 0.0);
        // B unidentifiable with zero input
        assert!(est.rank_deficient);
    }

    #[test]
    fn bd_static_case_is_least_squares_gain() {
        let u = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let y = DMatrix::from_row_slice(1, 4, &[2.1, 3.9, 6.2, 7.8]);
        let rec = IoRecord::fully_observed(u.clone(), y.clone()).unwrap();
        let est = estimate_bd_x0(&DMatrix::zeros(0, 0), &DMatrix::zeros(1, 0), &rec).unwrap();
        let gain = u.dot(&y) / u.dot(&u);
        assert!((est.d[(0, 0)] - gain).abs() < 1e-12);
    }

    #[test]
    fn model_toml_round_trip() {
        let m = StateSpaceModel::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.25, -0.125, 0.1]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.3]),
            DMatrix::from_row_slice(1, 2, &[0.7, -0.2]),
            DMatrix::from_row_slice(1, 1, &[0.01]),
            DVector::from_vec(vec![1.0 / 3.0, -2.0]),
        )
        .unwrap();
        let text = toml::to_string(&m).unwrap();
        let back: StateSpaceModel = toml::from_str(&text).unwrap();
        assert_eq!(back, m);
        let broken = text.replace("n_x = 2", "n_x = 3");
        assert!(toml::from_str::<StateSpaceModel>(&broken).is_err());
    }
}
