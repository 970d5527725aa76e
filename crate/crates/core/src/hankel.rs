//! Block-Hankel algebra and the weighted operator `G`.
//!
//! `G(y) = Y_{0,r,N} * B_map` with `B_map = Pi * Phi^T * W2`, where `Pi`
//! projects onto the nullspace of the future-input Hankel matrix, `Phi`
//! stacks past inputs and outputs as instruments and `W2` is the PO-MOESP
//! right weight. The left weight is the identity.
//!
//! Raw records are indexed so that the first `s` samples only feed the
//! instruments; sample `s` of the raw record is time 0 of the identification
//! window, which has `N + r - 1` samples.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative cutoff for the pseudoinverse inside the nullspace projector.
pub const PROJECTOR_RANK_TOL: f64 = 1e-10;

/// Relative eigenvalue floor used when inverting `Phi * Pi * Phi^T`.
pub const DEFAULT_EIG_FLOOR: f64 = 1e-8;

/// Multichannel input/output record with an observation mask on the outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct IoRecord {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    observed: Vec<bool>,
}

impl IoRecord {
    /// `inputs` is `n_m x T`, `outputs` is `n_p x T`, `observed[k]` marks
    /// samples whose output was measured.
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>, observed: Vec<bool>) -> Result<Self> {
        if inputs.ncols() != outputs.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "inputs have {} samples, outputs have {}",
                inputs.ncols(),
                outputs.ncols()
            )));
        }
        if observed.len() != outputs.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries for {} samples",
                observed.len(),
                outputs.ncols()
            )));
        }
        if inputs.nrows() == 0 || outputs.nrows() == 0 {
            return Err(Error::InvalidParameter(
                "record needs at least one input and one output channel".into(),
            ));
        }
        Ok(Self {
            inputs,
            outputs,
            observed,
        })
    }

    pub fn fully_observed(inputs: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        let n = outputs.ncols();
        Self::new(inputs, outputs, vec![true; n])
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn len(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        self.observed
            .iter()
            .enumerate()
            .filter_map(|(k, &o)| o.then_some(k))
            .collect()
    }

    /// Contiguous sub-record `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::RecordTooShort {
                needed: start + len,
                available: self.len(),
            });
        }
        Ok(Self {
            inputs: self.inputs.columns(start, len).into_owned(),
            outputs: self.outputs.columns(start, len).into_owned(),
            observed: self.observed[start..start + len].to_vec(),
        })
    }

    /// Same inputs and mask, replaced outputs.
    pub fn with_outputs(&self, outputs: DMatrix<f64>) -> Result<Self> {
        if outputs.shape() != self.outputs.shape() {
            return Err(Error::ShapeMismatch(format!(
                "expected outputs {:?}, got {:?}",
                self.outputs.shape(),
                outputs.shape()
            )));
        }
        Ok(Self {
            inputs: self.inputs.clone(),
            outputs,
            observed: self.observed.clone(),
        })
    }

    pub(crate) fn outputs_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.outputs
    }
}

/// Hankel dimensions: `r` block rows, `s` instrument horizon, `n` columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HankelParams {
    pub r: usize,
    pub s: usize,
    pub n: usize,
}

impl HankelParams {
    /// Uses every sample of a record of length `len`: `N = len - s - r + 1`.
    pub fn for_record_len(len: usize, r: usize, s: usize) -> Result<Self> {
        if len + 1 < s + r + 1 {
            return Err(Error::RecordTooShort {
                needed: s + r,
                available: len,
            });
        }
        let params = Self {
            r,
            s,
            n: len + 1 - s - r,
        };
        params.validate(len)?;
        Ok(params)
    }

    pub fn required_len(&self) -> usize {
        self.s + self.n + self.r - 1
    }

    /// Length of the identification window, `N + r - 1`.
    pub fn window_len(&self) -> usize {
        self.n + self.r - 1
    }

    pub fn validate(&self, record_len: usize) -> Result<()> {
        if self.r < 2 {
            return Err(Error::InvalidParameter(format!("r must be >= 2, got {}", self.r)));
        }
        if self.s < 1 {
            return Err(Error::InvalidParameter("s must be >= 1".into()));
        }
        if self.n < 1 {
            return Err(Error::InvalidParameter("N must be >= 1".into()));
        }
        if record_len < self.required_len() {
            return Err(Error::RecordTooShort {
                needed: self.required_len(),
                available: record_len,
            });
        }
        Ok(())
    }
}

/// Block-Hankel matrix `H_{i,j,k}` of the column sequence `h` (one column
/// per sample): block entry `(a, b)` is `h(i + a + b)`.
pub fn build_block_hankel(h: &DMatrix<f64>, i: usize, j: usize, k: usize) -> Result<DMatrix<f64>> {
    let dim = h.nrows();
    if j == 0 || k == 0 {
        return Ok(DMatrix::zeros(j * dim, k));
    }
    let last = i + j + k - 2;
    if last >= h.ncols() {
        return Err(Error::IndexOutOfRange(format!(
            "Hankel needs sample {last}, sequence has {}",
            h.ncols()
        )));
    }
    let mut out = DMatrix::zeros(j * dim, k);
    for a in 0..j {
        for b in 0..k {
            out.view_mut((a * dim, b), (dim, 1))
                .copy_from(&h.column(i + a + b));
        }
    }
    Ok(out)
}

/// Orthogonal projector onto the nullspace of `u`: `I - u^T (u u^T)^+ u`.
pub fn nullspace_projector(u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = u.ncols();
    let mut pi = DMatrix::identity(n, n);
    if u.nrows() == 0 {
        return Ok(pi);
    }
    let dec = linalg::svd(u)?;
    let max = dec.singular_values.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(pi);
    }
    for (idx, &sv) in dec.singular_values.iter().enumerate() {
        if sv > PROJECTOR_RANK_TOL * max {
            let v = dec.v_t.row(idx);
            pi -= v.transpose() * v;
        }
    }
    Ok((&pi + pi.transpose()) * 0.5)
}

/// Instruments `Phi = [U_{-s,s,N}; Y_{-s,s,N}]` from the raw record.
pub fn build_instruments(record: &IoRecord, params: &HankelParams) -> Result<DMatrix<f64>> {
    params.validate(record.len())?;
    let up = build_block_hankel(record.inputs(), 0, params.s, params.n)?;
    let yp = build_block_hankel(record.outputs(), 0, params.s, params.n)?;
    let mut phi = DMatrix::zeros(up.nrows() + yp.nrows(), params.n);
    phi.rows_mut(0, up.nrows()).copy_from(&up);
    phi.rows_mut(up.nrows(), yp.nrows()).copy_from(&yp);
    Ok(phi)
}

/// `W2 = (Phi Pi Phi^T)^{-1/2}` with eigenvalues floored at
/// `eig_floor * lambda_max` before inversion.
pub fn build_weight_w2(phi: &DMatrix<f64>, pi: &DMatrix<f64>, eig_floor: f64) -> Result<DMatrix<f64>> {
    if phi.ncols() != pi.nrows() || pi.nrows() != pi.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "Phi is {:?}, Pi is {:?}",
            phi.shape(),
            pi.shape()
        )));
    }
    let m = phi * pi * phi.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(m);
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::InstrumentsAnnihilated);
    }
    let floor = eig_floor * max;
    let vals = eig.eigenvalues.map(|l| 1.0 / l.max(floor).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// The linear map `y -> Hankel(y) * b_map` over an identification window.
///
/// Immutable once built; the factorization of `G* G + I` used by the solver
/// is computed lazily and cached.
#[derive(Debug, Clone)]
pub struct GOperator {
    params: HankelParams,
    n_p: usize,
    n_m: usize,
    /// `N x n_c` right factor, `Pi * Phi^T * W2`.
    b_map: DMatrix<f64>,
    pi: DMatrix<f64>,
    phi: DMatrix<f64>,
    w2: DMatrix<f64>,
    normal_factor: OnceLock<Option<Cholesky<f64, Dyn>>>,
    gram_split: OnceLock<GramSplit>,
}

/// Eigen split of `G* G`: an orthonormal basis of `ker G` and the
/// pseudoinverse on its complement.
#[derive(Debug, Clone)]
pub(crate) struct GramSplit {
    pub kernel: DMatrix<f64>,
    pub pinv: DMatrix<f64>,
}

/// Eigenvalues of `G* G` at or below this fraction of the largest count as
/// kernel directions.
pub const KERNEL_EIG_TOL: f64 = 1e-11;

impl GOperator {
    pub fn params(&self) -> &HankelParams {
        &self.params
    }

    pub fn n_p(&self) -> usize {
        self.n_p
    }

    pub fn n_m(&self) -> usize {
        self.n_m
    }

    pub fn b_map(&self) -> &DMatrix<f64> {
        &self.b_map
    }

    pub fn pi(&self) -> &DMatrix<f64> {
        &self.pi
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn w2(&self) -> &DMatrix<f64> {
        &self.w2
    }

    /// Cholesky factor of `G* G + I` in the channel-fastest vectorization.
    pub(crate) fn normal_factor(&self) -> Option<&Cholesky<f64, Dyn>> {
        self.normal_factor
            .get_or_init(|| {
                let mut m = self.gram();
                for i in 0..m.nrows() {
                    m[(i, i)] += 1.0;
                }
                Cholesky::new(m)
            })
            .as_ref()
    }

    pub(crate) fn gram_split(&self) -> &GramSplit {
        self.gram_split.get_or_init(|| {
            let eig = nalgebra::SymmetricEigen::new(self.gram());
            let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
            let kernel: Vec<usize> = (0..eig.eigenvalues.len())
                .filter(|&i| eig.eigenvalues[i] <= KERNEL_EIG_TOL * max)
                .collect();
            let inv = eig
                .eigenvalues
                .map(|l| if l > KERNEL_EIG_TOL * max { 1.0 / l } else { 0.0 });
            GramSplit {
                kernel: eig.eigenvectors.select_columns(&kernel),
                pinv: &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose(),
            }
        })
    }

    /// Dimension of `ker G`.
    pub fn kernel_dim(&self) -> usize {
        self.gram_split().kernel.ncols()
    }

    pub fn r(&self) -> usize {
        self.params.r
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn n_c(&self) -> usize {
        self.b_map.ncols()
    }

    pub fn window_len(&self) -> usize {
        self.params.window_len()
    }

    /// Shape of `G(y)`.
    pub fn output_shape(&self) -> (usize, usize) {
        (self.r() * self.n_p, self.n_c())
    }

    /// Builds an operator directly from a right factor, with `Pi = I` and no
    /// instruments. Mostly useful for tests and small worked examples.
    pub fn from_b_map(r: usize, n_p: usize, b_map: DMatrix<f64>) -> Self {
        let n = b_map.nrows();
        Self {
            params: HankelParams { r, s: 0, n },
            n_p,
            n_m: 0,
            pi: DMatrix::identity(n, n),
            phi: DMatrix::zeros(0, n),
            w2: DMatrix::identity(b_map.ncols(), b_map.ncols()),
            b_map,
            normal_factor: OnceLock::new(),
            gram_split: OnceLock::new(),
        }
    }

    pub fn apply(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        apply_g(self, y)
    }

    pub fn adjoint(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        adjoint_g(self, v)
    }

    /// Dense matrix of `G* G` acting on `vec(y)` with samples stacked
    /// channel-fastest (index `t * n_p + c`).
    pub fn gram(&self) -> DMatrix<f64> {
        let len = self.window_len();
        let dim = len * self.n_p;
        let mut out = DMatrix::zeros(dim, dim);
        let mut basis = DMatrix::zeros(self.n_p, len);
        for t in 0..len {
            for c in 0..self.n_p {
                basis[(c, t)] = 1.0;
                let gy = self.hankel_times_b(&basis);
                let back = self.adjoint_unchecked(&gy);
                basis[(c, t)] = 0.0;
                out.column_mut(t * self.n_p + c)
                    .copy_from_slice(back.as_slice());
            }
        }
        (&out + out.transpose()) * 0.5
    }

    fn hankel_times_b(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let (r, n, n_p) = (self.r(), self.n(), self.n_p);
        let mut out = DMatrix::zeros(r * n_p, self.n_c());
        for a in 0..r {
            let rows = y.columns(a, n);
            let block = rows * &self.b_map;
            out.rows_mut(a * n_p, n_p).copy_from(&block);
        }
        out
    }

    fn adjoint_unchecked(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let (r, n, n_p) = (self.r(), self.n(), self.n_p);
        let mut g = DMatrix::zeros(n_p, self.window_len());
        for a in 0..r {
            // block row a contributes to samples a..a+N
            let contrib = v.rows(a * n_p, n_p) * self.b_map.transpose();
            let mut target = g.columns_mut(a, n);
            target += contrib;
        }
        g
    }
}

/// Precomputes `B_map = Pi Phi^T W2` for a raw record.
pub fn build_g_operator(record: &IoRecord, params: &HankelParams) -> Result<GOperator> {
    build_g_operator_with_floor(record, params, DEFAULT_EIG_FLOOR)
}

pub fn build_g_operator_with_floor(
    record: &IoRecord,
    params: &HankelParams,
    eig_floor: f64,
) -> Result<GOperator> {
    params.validate(record.len())?;
    let u_future = build_block_hankel(record.inputs(), params.s, params.r, params.n)?;
    let pi = nullspace_projector(&u_future)?;
    let phi = build_instruments(record, params)?;
    let w2 = build_weight_w2(&phi, &pi, eig_floor)?;
    let b_map = &pi * phi.transpose() * &w2;
    Ok(GOperator {
        params: *params,
        n_p: record.n_outputs(),
        n_m: record.n_inputs(),
        b_map,
        pi,
        phi,
        w2,
        normal_factor: OnceLock::new(),
        gram_split: OnceLock::new(),
    })
}

/// `G(y) = Hankel(y) * B_map` for `y` of shape `n_p x (N + r - 1)`.
pub fn apply_g(op: &GOperator, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if y.shape() != (op.n_p, op.window_len()) {
        return Err(Error::ShapeMismatch(format!(
            "expected output sequence {:?}, got {:?}",
            (op.n_p, op.window_len()),
            y.shape()
        )));
    }
    Ok(op.hankel_times_b(y))
}

/// Exact adjoint of [`apply_g`] under the trace inner product.
///
/// Sample `t` collects block rows `a` with `max(0, t - N + 1) <= a <= min(r - 1, t)`.
pub fn adjoint_g(op: &GOperator, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if v.shape() != op.output_shape() {
        return Err(Error::ShapeMismatch(format!(
            "expected {:?}, got {:?}",
            op.output_shape(),
            v.shape()
        )));
    }
    Ok(op.adjoint_unchecked(v))
}
