use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsid_core::*;

/// Zero inputs, so `G` is injective and the shutoff output is zero.
fn injective_instance(seed: u64) -> (IoRecord, HankelParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_p, r, s, n) = (2, 3, 3, rng.random_range(8..=9));
    let len = s + n + r - 1;
    let y = DMatrix::from_fn(n_p, len, |_, _| rng.random_range(-1.0..1.0));
    (IoRecord::fully_observed(DMatrix::zeros(1, len), y).unwrap(), HankelParams { r, s, n })
}

/// The filter returned `y_hat = 0` with a converged solve.
fn shut_off(op: &GOperator, rec: &IoRecord, lambda_nuc: f64, lambda_sparse: f64) -> bool {
    let p = RobustProblem::from_record(op, rec, Penalties::new(lambda_nuc, lambda_sparse).unwrap()).unwrap();
    let res = solve_robust(&p, &SolveOptions::precise()).unwrap();
    res.converged && res.y_hat.amax() <= 1e-6 * rec.outputs().amax()
}

#[test]
fn nuclear_shutoff_agrees_with_bisection() {
    for seed in [100, 101] {
        let (rec, params) = injective_instance(seed);
        let op = build_g_operator(&rec, &params).unwrap();
        assert_eq!(op.kernel_dim(), 0);
        let b = penalty_bounds_for_record(&op, &rec).unwrap();
        let ls = 1.001 * b.lambda_sparse_max;
        let (mut lo, mut hi) = (0.5 * b.lambda_nuc_max, 2.0 * b.lambda_nuc_max);
        assert!(!shut_off(&op, &rec, lo, ls));
        assert!(shut_off(&op, &rec, hi, ls));
        for _ in 0..14 {
            let mid = 0.5 * (lo + hi);
            if shut_off(&op, &rec, mid, ls) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let rel = (hi - b.lambda_nuc_max).abs() / b.lambda_nuc_max;
        assert!(rel < 1e-3, "seed {seed}: bisection {hi}, bound {}", b.lambda_nuc_max);
    }
}

#[test]
fn certificate_is_feasible_and_tight() {
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = 20;
        let u = DMatrix::from_fn(1, len, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(2, len, |_, _| rng.random_range(-1.0..1.0));
        let rec = IoRecord::fully_observed(u, y).unwrap();
        let params = HankelParams::for_record_len(len, 3, 3).unwrap();
        let op = build_g_operator(&rec, &params).unwrap();
        let win = rec.window(params.s, params.window_len()).unwrap();
        let ls = lambda_sparse_max(win.outputs(), win.observed()).unwrap();
        let cert = dual_certificate(&op, win.outputs(), win.observed(), ls, CertificateOptions::default()).unwrap();
        assert!(cert.lower_bound <= cert.value * (1.0 + 1e-9));
        assert!(cert.value - cert.lower_bound <= 1e-5 * cert.value);
        // G(y*) = 0 and the dual matrix satisfies G*(W) = g at y*
        assert!(op.apply(&cert.shutoff).unwrap().amax() <= 1e-8 * (1.0 + cert.shutoff.amax()));
        let g = huber_gradient_at_zero(&(win.outputs() - &cert.shutoff), win.observed(), ls);
        assert!((op.adjoint(&cert.w).unwrap() - &g).amax() <= 1e-6 * (1.0 + g.amax()));
        let spectral = cert.w.clone().svd(false, false).singular_values.max();
        assert!((spectral - cert.value).abs() <= 1e-9 * (1.0 + cert.value));
    }
}

#[test]
fn zero_outputs_give_zero_bounds() {
    let len = 16;
    let u = DMatrix::from_fn(1, len, |_, k| (k as f64).sin());
    let rec = IoRecord::fully_observed(u, DMatrix::zeros(1, len)).unwrap();
    let params = HankelParams::for_record_len(len, 3, 2).unwrap();
    let op = build_g_operator(&rec, &params).unwrap();
    let b = penalty_bounds_for_record(&op, &rec).unwrap();
    assert_eq!(b.lambda_sparse_max, 0.0);
    assert_eq!(b.lambda_nuc_max, 0.0);
}
