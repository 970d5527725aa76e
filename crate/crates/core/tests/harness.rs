use rsid_core::harness::{add_noise, inject_outliers, MonteCarloConfig, OutlierPlan, SyntheticBenchmark};
use rsid_core::*;

#[test]
fn noise_std_is_proportional_to_channel_std() {
    let bench = SyntheticBenchmark {
        window: 2000,
        ..Default::default()
    };
    let (clean, _) = bench.generate();
    let noisy = add_noise(&clean, 0.1, 42).unwrap();
    let added = noisy.outputs() - clean.outputs();
    for c in 0..clean.n_outputs() {
        let std = |v: Vec<f64>| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        let sig = std(clean.outputs().row(c).iter().copied().collect());
        let noise = std(added.row(c).iter().copied().collect());
        let ratio = noise / (0.1 * sig);
        assert!((ratio - 1.0).abs() < 0.1, "channel {c}: ratio {ratio}");
    }
    assert_eq!(add_noise(&clean, 0.1, 42).unwrap().outputs(), noisy.outputs());
    assert_eq!(add_noise(&clean, 0.0, 42).unwrap().outputs(), clean.outputs());
}

#[test]
fn injection_is_deterministic_and_sparse() {
    let (clean, _) = SyntheticBenchmark::default().generate();
    let plan = OutlierPlan::new(10, 20.0, 9).within(5, 85);
    let (a, ia) = inject_outliers(&clean, &plan).unwrap();
    let (b, ib) = inject_outliers(&clean, &plan).unwrap();
    assert_eq!(ia, ib);
    assert_eq!(a.outputs(), b.outputs());
    let diff = a.outputs() - clean.outputs();
    assert_eq!(diff.iter().filter(|v| **v != 0.0).count(), 10);
    assert!(ia.iter().all(|i| (5..90).contains(&i.index)));
    let (same, none) = inject_outliers(&clean, &OutlierPlan::new(0, 20.0, 9)).unwrap();
    assert!(none.is_empty());
    assert_eq!(same.outputs(), clean.outputs());
    assert!(inject_outliers(&clean, &OutlierPlan::new(86, 20.0, 9).within(5, 85)).is_err());
}

#[test]
fn monte_carlo_does_not_depend_on_worker_count() {
    let bench = SyntheticBenchmark::default();
    let (clean, _) = bench.generate();
    let params = bench.hankel_params(5).unwrap();
    let cfg = MonteCarloConfig {
        iterations: 6,
        noise_level: 0.1,
        seed: 3,
        ..Default::default()
    };
    let pen = Penalties::new(1.0, 1.0).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| monte_carlo(&clean, &params, pen, &cfg, &IdentifyOptions::default()).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn zero_outliers_or_iterations_are_rejected() {
    let bench = SyntheticBenchmark::default();
    let (clean, _) = bench.generate();
    let params = bench.hankel_params(5).unwrap();
    let pen = Penalties::new(1.0, 1.0).unwrap();
    let opts = IdentifyOptions::default();
    let cfg = MonteCarloConfig {
        outliers: 0,
        iterations: 1,
        ..Default::default()
    };
    assert!(matches!(monte_carlo(&clean, &params, pen, &cfg, &opts), Err(Error::Degenerate(_))));
    let cfg = MonteCarloConfig {
        iterations: 0,
        ..Default::default()
    };
    assert!(monte_carlo(&clean, &params, pen, &cfg, &opts).is_err());
}
