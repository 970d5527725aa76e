//! Reference implementations shared by the integration and acceptance tests.
//! Nothing here calls the library's operator or solver code.

#![allow(dead_code)]

use rsid_core::DMatrix;

/// Dense matrix of `vec(y) -> vec(Hankel(y) * b_map)`, with `vec(y)` stacked
/// channel-fastest and `vec(G)` column-major.
pub fn dense_g(b_map: &DMatrix<f64>, r: usize, n_p: usize) -> DMatrix<f64> {
    let (n, n_c) = b_map.shape();
    let len = n + r - 1;
    let rows = r * n_p;
    let mut m = DMatrix::zeros(rows * n_c, len * n_p);
    // G[a n_p + c, j] = sum_b y[c, a + b] * B[b, j]
    for a in 0..r {
        for c in 0..n_p {
            for j in 0..n_c {
                let out = j * rows + a * n_p + c;
                for b in 0..n {
                    m[(out, (a + b) * n_p + c)] += b_map[(b, j)];
                }
            }
        }
    }
    m
}

pub fn unvec(v: &DMatrix<f64>, nrows: usize, ncols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(nrows, ncols, v.as_slice())
}

pub fn vec_of(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(m.len(), 1, m.as_slice())
}

pub fn nuclear(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.sum()
}

/// `min_e (x - e)^2 + lambda |e|`.
pub fn huber(x: f64, lambda: f64) -> f64 {
    if lambda.is_infinite() || x.abs() <= lambda / 2.0 {
        x * x
    } else {
        lambda * x.abs() - lambda * lambda / 4.0
    }
}

/// A filtering problem in reference form.
pub struct HuberForm {
    pub g: DMatrix<f64>,
    /// Shape of `G(y)`.
    pub g_shape: (usize, usize),
    /// `n_p x len`.
    pub y_meas: DMatrix<f64>,
    pub observed: Vec<bool>,
    pub lambda_nuc: f64,
    pub lambda_sparse: f64,
}

impl HuberForm {
    pub fn objective(&self, y: &DMatrix<f64>) -> f64 {
        let gy = unvec(&(&self.g * vec_of(y)), self.g_shape.0, self.g_shape.1);
        let mut fit = 0.0;
        for k in 0..y.ncols() {
            if self.observed[k] {
                for c in 0..y.nrows() {
                    fit += huber(y[(c, k)] - self.y_meas[(c, k)], self.lambda_sparse);
                }
            }
        }
        self.lambda_nuc * nuclear(&gy) + fit
    }

    fn fit_gradient(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let half = self.lambda_sparse / 2.0;
        DMatrix::from_fn(y.nrows(), y.ncols(), |c, k| {
            if self.observed[k] {
                2.0 * (y[(c, k)] - self.y_meas[(c, k)]).clamp(-half, half)
            } else {
                0.0
            }
        })
    }

    /// Prox of `t * ||G(.)||_*` at `v`, through projected gradient on the
    /// dual variable `w` (spectral-norm ball of radius `t`).
    fn prox(&self, v: &DMatrix<f64>, t: f64, w: &mut DMatrix<f64>, step: f64) -> DMatrix<f64> {
        let vv = vec_of(v);
        let gt = self.g.transpose();
        let mut z = w.clone();
        let mut w_prev = w.clone();
        let mut theta = 1.0_f64;
        for _ in 0..20_000 {
            let x = &vv - &gt * &z;
            let moved = &z + (&self.g * &x) * step;
            let next = project_ball(&unvec(&moved, self.g_shape.0, self.g_shape.1), t);
            let next = vec_of(&next);
            let change = (&next - &w_prev).amax();
            let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            z = &next + (&next - &w_prev) * ((theta - 1.0) / theta_next);
            w_prev = next;
            theta = theta_next;
            if change < 1e-13 * (1.0 + t) {
                break;
            }
        }
        *w = w_prev.clone();
        unvec(&(&vv - &gt * &w_prev), v.nrows(), v.ncols())
    }
}

fn project_ball(m: &DMatrix<f64>, radius: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let s = svd.singular_values.map(|x| x.min(radius));
    svd.u.unwrap() * DMatrix::from_diagonal(&s) * svd.v_t.unwrap()
}

/// Accelerated proximal gradient on the Huber form. Returns the best iterate
/// and its objective.
pub fn fista_oracle(p: &HuberForm, iterations: usize) -> (DMatrix<f64>, f64) {
    let step = 0.5; // gradient of the fit is 2-Lipschitz
    let g_norm2 = p.g.clone().svd(false, false).singular_values.max().powi(2).max(1e-300);
    let inner_step = 1.0 / g_norm2;
    let mut w = DMatrix::zeros(p.g.nrows(), 1);
    let mut y = DMatrix::from_fn(p.y_meas.nrows(), p.y_meas.ncols(), |c, k| {
        if p.observed[k] {
            p.y_meas[(c, k)]
        } else {
            0.0
        }
    });
    let mut z = y.clone();
    let mut theta = 1.0_f64;
    let mut best = (y.clone(), p.objective(&y));
    for _ in 0..iterations {
        let v = &z - p.fit_gradient(&z) * step;
        let next = p.prox(&v, step * p.lambda_nuc, &mut w, inner_step);
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        z = &next + (&next - &y) * ((theta - 1.0) / theta_next);
        y = next;
        theta = theta_next;
        let f = p.objective(&y);
        if f < best.1 {
            best = (y.clone(), f);
        }
    }
    best
}
