//! Inputs shared by the benchmarks.

use rsid_core::{DMatrix, GOperator, HankelParams, IoRecord, SyntheticBenchmark, build_g_operator};

/// Synthetic record, its Hankel parameters, the operator and the output window.
pub fn setup() -> (IoRecord, HankelParams, GOperator, DMatrix<f64>, Vec<bool>) {
    let bench = SyntheticBenchmark::default();
    let (rec, _) = bench.generate();
    let params = bench.hankel_params(5).expect("valid benchmark parameters");
    let op = build_g_operator(&rec, &params).expect("operator");
    let window = rec.window(params.s, params.window_len()).expect("window");
    let y = window.outputs().clone();
    let observed = window.observed().to_vec();
    (rec, params, op, y, observed)
}
