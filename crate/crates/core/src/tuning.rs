//! Penalty selection over the box `(0, lambda_nuc_max] x (0, lambda_sparse_max]`.
//!
//! Every grid cell runs the full pipeline (solve, realize, simulate). Cells
//! are evaluated in parallel and collected in grid order, so results match a
//! sequential run.

use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{penalty_bounds_for_record, PenaltyBounds};
use crate::error::{Error, Result};
use crate::hankel::{build_g_operator, GOperator, HankelParams, IoRecord};
use crate::realization::{realize, simulate, IdentifyOptions, StateSpaceModel};
use crate::solver::{solve_robust, Penalties, RobustProblem};

const LOG_DECADES: f64 = 3.0;
const KNEE_TIE_TOL: f64 = 1e-9;
const MIN_VALIDATION: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Linear,
    /// Geometric over three decades ending at the maximum.
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_nuc: usize,
    pub n_sparse: usize,
    pub spacing: Spacing,
    pub bounds: PenaltyBounds,
}

fn axis(max: f64, n: usize, spacing: Spacing) -> Vec<f64> {
    (1..=n)
        .map(|i| match spacing {
            Spacing::Linear => max * i as f64 / n as f64,
            Spacing::Log => {
                if i == n {
                    max
                } else {
                    max * 10f64.powf(-LOG_DECADES * (n - i) as f64 / (n - 1) as f64)
                }
            }
        })
        .collect()
}

impl GridSpec {
    pub fn new(n_nuc: usize, n_sparse: usize, spacing: Spacing, bounds: PenaltyBounds) -> Result<Self> {
        let spec = Self {
            n_nuc,
            n_sparse,
            spacing,
            bounds,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nuc < 2 || self.n_sparse < 2 {
            return Err(Error::InvalidParameter("grid counts must be >= 2".into()));
        }
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.bounds.lambda_nuc_max) || !ok(self.bounds.lambda_sparse_max) {
            return Err(Error::EmptyTuningRegion);
        }
        Ok(())
    }

    pub fn nuc_values(&self) -> Vec<f64> {
        axis(self.bounds.lambda_nuc_max, self.n_nuc, self.spacing)
    }

    pub fn sparse_values(&self) -> Vec<f64> {
        axis(self.bounds.lambda_sparse_max, self.n_sparse, self.spacing)
    }
}

/// Grid counts and spacing; the bounds come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningPlan {
    pub n_nuc: usize,
    pub n_sparse: usize,
    pub spacing: Spacing,
}

impl Default for TuningPlan {
    fn default() -> Self {
        Self {
            n_nuc: 20,
            n_sparse: 20,
            spacing: Spacing::Linear,
        }
    }
}

impl TuningPlan {
    pub fn grid(&self, bounds: PenaltyBounds) -> Result<GridSpec> {
        GridSpec::new(self.n_nuc, self.n_sparse, self.spacing, bounds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Knee,
    #[serde(rename = "cv")]
    CrossValidation,
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Knee => "knee",
            Self::CrossValidation => "cv",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub lambda_nuc: f64,
    pub lambda_sparse: f64,
    pub method: SelectionMethod,
    /// Set when the knee search found no convex corner.
    pub no_distinct_knee: bool,
}

impl Selection {
    pub fn penalties(&self) -> Result<Penalties> {
        Penalties::new(self.lambda_nuc, self.lambda_sparse)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceKind {
    Training,
    Validation,
}

/// Residual per grid cell. Row `i` is `nuc[i]`, column `j` is `sparse[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningSurface {
    pub kind: SurfaceKind,
    pub nuc: Vec<f64>,
    pub sparse: Vec<f64>,
    /// NaN on failed cells.
    pub residual: DMatrix<f64>,
    /// Row-major flags: solver converged and realization succeeded.
    pub converged: Vec<bool>,
    pub selected: Option<Selection>,
}

impl TuningSurface {
    pub fn is_converged(&self, i: usize, j: usize) -> bool {
        self.converged[i * self.sparse.len() + j]
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.nuc.len()).flat_map(move |i| (0..self.sparse.len()).map(move |j| (i, j)))
    }
}

/// `sum over observed samples of |simulate(model) - y_meas - e_hat|^2`, with
/// `record` the identification window the model was fitted on. The sign of
/// `e_hat` follows the objective, where `e ~ y - y_meas`.
pub fn residual_training_error(model: &StateSpaceModel, e_hat: &DMatrix<f64>, record: &IoRecord) -> Result<f64> {
    if e_hat.shape() != record.outputs().shape() {
        return Err(Error::ShapeMismatch(format!(
            "e_hat {:?} vs outputs {:?}",
            e_hat.shape(),
            record.outputs().shape()
        )));
    }
    let sim = crate::realization::simulate_checked(model, record.inputs())?;
    Ok(record
        .observed_indices()
        .into_iter()
        .map(|k| (sim.column(k) - record.outputs().column(k) - e_hat.column(k)).norm_squared())
        .sum())
}

struct CellOutcome {
    residual: f64,
    ok: bool,
}

fn evaluate_cell<F>(
    op: &GOperator,
    record: &IoRecord,
    penalties: Penalties,
    opts: &IdentifyOptions,
    score: F,
) -> CellOutcome
where
    F: Fn(&StateSpaceModel, &DMatrix<f64>) -> Result<f64>,
{
    let failed = CellOutcome {
        residual: f64::NAN,
        ok: false,
    };
    let Ok(problem) = RobustProblem::from_record(op, record, penalties) else {
        return failed;
    };
    let Ok(solve) = solve_robust(&problem, &opts.solver) else {
        return failed;
    };
    if !solve.converged {
        return failed;
    }
    let Ok(id) = realize(op, record, solve, opts.order) else {
        return failed;
    };
    match score(&id.model, &id.solve.e_hat) {
        Ok(v) if v.is_finite() => CellOutcome { residual: v, ok: true },
        _ => failed,
    }
}

fn evaluate_grid<F>(
    op: &GOperator,
    record: &IoRecord,
    grid: &GridSpec,
    opts: &IdentifyOptions,
    kind: SurfaceKind,
    score: F,
) -> Result<TuningSurface>
where
    F: Fn(&StateSpaceModel, &DMatrix<f64>) -> Result<f64> + Sync,
{
    grid.validate()?;
    let nuc = grid.nuc_values();
    let sparse = grid.sparse_values();
    let cells: Vec<(usize, usize)> = (0..nuc.len())
        .flat_map(|i| (0..sparse.len()).map(move |j| (i, j)))
        .collect();
    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .map(|&(i, j)| match Penalties::new(nuc[i], sparse[j]) {
            Ok(p) => evaluate_cell(op, record, p, opts, &score),
            Err(_) => CellOutcome {
                residual: f64::NAN,
                ok: false,
            },
        })
        .collect();
    let residual = DMatrix::from_fn(nuc.len(), sparse.len(), |i, j| outcomes[i * sparse.len() + j].residual);
    Ok(TuningSurface {
        kind,
        nuc,
        sparse,
        residual,
        converged: outcomes.iter().map(|o| o.ok).collect(),
        selected: None,
    })
}

/// Residual training error on every grid cell.
pub fn grid_search(
    record: &IoRecord,
    params: &HankelParams,
    grid: &GridSpec,
    opts: &IdentifyOptions,
) -> Result<TuningSurface> {
    grid.validate()?;
    let op = build_g_operator(record, params)?;
    let window = record.window(params.s, params.window_len())?;
    evaluate_grid(&op, record, grid, opts, SurfaceKind::Training, |model, e_hat| {
        residual_training_error(model, e_hat, &window)
    })
}

/// Computes the penalty bounds of `record`, then runs [`grid_search`].
pub fn grid_search_auto(
    record: &IoRecord,
    params: &HankelParams,
    plan: &TuningPlan,
    opts: &IdentifyOptions,
) -> Result<TuningSurface> {
    let op = build_g_operator(record, params)?;
    let bounds = penalty_bounds_for_record(&op, record)?;
    grid_search(record, params, &plan.grid(bounds)?, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Knee {
    pub index: usize,
    /// False when no interior point has positive curvature above the rest.
    pub distinct: bool,
}

/// Index of maximum convex curvature after scaling both axes to `[0, 1]`.
/// Ties go to the smaller `lambda`.
pub fn knee_point(lambdas: &[f64], residuals: &[f64]) -> Result<Knee> {
    let n = lambdas.len();
    if n != residuals.len() {
        return Err(Error::ShapeMismatch("lambda and residual lengths differ".into()));
    }
    if n < 3 {
        return Err(Error::InvalidParameter(format!("knee needs at least 3 points, got {n}")));
    }
    if lambdas.iter().chain(residuals).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("knee curve has non-finite values".into()));
    }
    if lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("lambda must be strictly increasing".into()));
    }
    let normalize = |v: &[f64]| -> Vec<f64> {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            v.iter().map(|x| (x - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; v.len()]
        }
    };
    let x = normalize(lambdas);
    let y = normalize(residuals);
    let curv: Vec<f64> = (1..n - 1)
        .map(|i| {
            let right = (y[i + 1] - y[i]) / (x[i + 1] - x[i]);
            let left = (y[i] - y[i - 1]) / (x[i] - x[i - 1]);
            2.0 * (right - left) / (x[i + 1] - x[i - 1])
        })
        .collect();
    let max = curv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = curv.iter().fold(0.0_f64, |m, c| m.max(c.abs())).max(1.0);
    let tol = KNEE_TIE_TOL * scale;
    let first = curv.iter().position(|&c| c >= max - tol).unwrap_or(0);
    let distinct = max > tol && curv.iter().any(|&c| c < max - tol);
    Ok(Knee {
        index: first + 1,
        distinct,
    })
}

/// Which penalty varies along a knee slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KneeAxis {
    /// Vary `lambda_nuc` at a fixed `lambda_sparse`.
    Nuc,
    /// Vary `lambda_sparse` at a fixed `lambda_nuc`.
    Sparse,
}

fn grid_index(values: &[f64], target: f64) -> Result<usize> {
    values
        .iter()
        .position(|&v| (v - target).abs() <= 1e-12 * v.abs().max(target.abs()))
        .ok_or_else(|| Error::InvalidParameter(format!("{target} is not a grid value")))
}

/// Knee of the 1-d slice through `fixed_value` of the other penalty.
pub fn select_by_knee(surface: &TuningSurface, axis: KneeAxis, fixed_value: f64) -> Result<Selection> {
    let (lambdas, cells): (&[f64], Vec<(usize, usize)>) = match axis {
        KneeAxis::Nuc => {
            let j = grid_index(&surface.sparse, fixed_value)?;
            (&surface.nuc, (0..surface.nuc.len()).map(|i| (i, j)).collect())
        }
        KneeAxis::Sparse => {
            let i = grid_index(&surface.nuc, fixed_value)?;
            (&surface.sparse, (0..surface.sparse.len()).map(|j| (i, j)).collect())
        }
    };
    let bad: Vec<(usize, usize)> = cells
        .iter()
        .copied()
        .filter(|&(i, j)| !surface.is_converged(i, j))
        .collect();
    if !bad.is_empty() {
        return Err(Error::UnconvergedSlice(bad));
    }
    let residuals: Vec<f64> = cells.iter().map(|&c| surface.residual[c]).collect();
    let knee = knee_point(lambdas, &residuals)?;
    let (i, j) = cells[knee.index];
    Ok(Selection {
        lambda_nuc: surface.nuc[i],
        lambda_sparse: surface.sparse[j],
        method: SelectionMethod::Knee,
        no_distinct_knee: !knee.distinct,
    })
}

/// Converged cell with the smallest residual; ties go to the largest
/// `(lambda_nuc, lambda_sparse)` in lexicographic order.
pub fn argmin_largest(surface: &TuningSurface) -> Result<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for (i, j) in surface.cells() {
        if !surface.is_converged(i, j) {
            continue;
        }
        let v = surface.residual[(i, j)];
        if best.is_none_or(|(_, b)| v <= b) {
            best = Some(((i, j), v));
        }
    }
    best.map(|(c, _)| c).ok_or(Error::EmptyTuningRegion)
}

/// Training and validation records for a contiguous-tail split.
pub fn split_record(record: &IoRecord, split_fraction: f64) -> Result<(IoRecord, usize)> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "split fraction must lie in (0, 1), got {split_fraction}"
        )));
    }
    let n_train = (split_fraction * record.len() as f64).floor() as usize;
    let n_valid = record.len() - n_train;
    if n_valid < MIN_VALIDATION {
        return Err(Error::InvalidParameter(format!(
            "validation window has {n_valid} samples, need at least {MIN_VALIDATION}"
        )));
    }
    Ok((record.window(0, n_train)?, n_train))
}

/// Identifies on the leading `split_fraction` of the record and scores each
/// cell by the squared simulation error on the held-out tail. Penalty
/// bounds come from the training part.
pub fn cross_validate(
    record: &IoRecord,
    r: usize,
    s: usize,
    plan: &TuningPlan,
    split_fraction: f64,
    opts: &IdentifyOptions,
) -> Result<TuningSurface> {
    let (train, n_train) = split_record(record, split_fraction)?;
    let params = HankelParams::for_record_len(n_train, r, s)?;
    let op = build_g_operator(&train, &params)?;
    let bounds = penalty_bounds_for_record(&op, &train)?;
    let grid = plan.grid(bounds)?;
    // the model state refers to raw sample s; simulate to the end of the record
    let tail_inputs = record.inputs().columns(s, record.len() - s).into_owned();
    let valid: Vec<usize> = (n_train..record.len()).filter(|&k| record.observed()[k]).collect();
    if valid.is_empty() {
        return Err(Error::Degenerate("validation window has no observed samples".into()));
    }
    let mut surface = evaluate_grid(&op, &train, &grid, opts, SurfaceKind::Validation, |model, _| {
        let sim = simulate(model, &tail_inputs);
        Ok(valid
            .iter()
            .map(|&k| (sim.column(k - s) - record.outputs().column(k)).norm_squared())
            .sum())
    })?;
    let (i, j) = argmin_largest(&surface)?;
    surface.selected = Some(Selection {
        lambda_nuc: surface.nuc[i],
        lambda_sparse: surface.sparse[j],
        method: SelectionMethod::CrossValidation,
        no_distinct_knee: false,
    });
    Ok(surface)
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant or fewer than two points are given.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Mean Spearman correlation of the residual with `lambda_nuc` (over
/// columns) and with `lambda_sparse` (over rows), using converged cells only.
/// Slices with fewer than three cells or a constant residual are skipped.
pub fn surface_trend(surface: &TuningSurface) -> (Option<f64>, Option<f64>) {
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let slice_corr = |cells: Vec<(usize, usize)>, lam: &dyn Fn(usize, usize) -> f64| {
        let cells: Vec<_> = cells.into_iter().filter(|&(i, j)| surface.is_converged(i, j)).collect();
        if cells.len() < 3 {
            return None;
        }
        let x: Vec<f64> = cells.iter().map(|&(i, j)| lam(i, j)).collect();
        let y: Vec<f64> = cells.iter().map(|&c| surface.residual[c]).collect();
        spearman(&x, &y)
    };
    let nuc = (0..surface.sparse.len())
        .filter_map(|j| slice_corr((0..surface.nuc.len()).map(|i| (i, j)).collect(), &|i, _| surface.nuc[i]))
        .collect();
    let sparse = (0..surface.nuc.len())
        .filter_map(|i| {
            slice_corr(
                (0..surface.sparse.len()).map(|j| (i, j)).collect(),
                &|_, j| surface.sparse[j],
            )
        })
        .collect();
    (mean(nuc), mean(sparse))
}

/// One row per cell: `lambda_nuc,lambda_sparse,residual,converged`.
pub fn write_surface_csv<W: Write>(surface: &TuningSurface, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lambda_nuc", "lambda_sparse", "residual", "converged"])?;
    for (i, j) in surface.cells() {
        w.write_record([
            surface.nuc[i].to_string(),
            surface.sparse[j].to_string(),
            surface.residual[(i, j)].to_string(),
            surface.is_converged(i, j).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
