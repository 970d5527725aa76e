use std::collections::BTreeMap;
use std::path::Path;

use rsid_core::harness::{MatrixDescriptor, MonteCarloSummary, RunReport};
use rsid_core::realization::{realize, simulate_checked};
use rsid_core::tuning::write_surface_csv;
use rsid_core::{
    build_g_operator, cross_validate, grid_search, inject_outliers, load_record, monte_carlo,
    penalty_bounds_for_record, select_by_knee, solve_robust, add_noise, Error, HankelParams,
    IdentifyOptions, IoRecord, KneeAxis, MonteCarloConfig, OutlierPlan, Penalties, RecordFormat,
    RobustProblem, Selection, SelectionMethod, StateSpaceModel, TuningSurface,
};
use serde::Serialize;

use crate::config::{DataFormat, RunConfig};
use crate::error::CliError;
use crate::output::{csv_text, ensure_dir, read_inputs, write_record, write_series, write_text, write_toml};

/// The configured record, or the synthetic benchmark when no file is set.
pub fn load(cfg: &RunConfig) -> Result<IoRecord, CliError> {
    let Some(path) = &cfg.data else {
        return Ok(cfg.benchmark.generate().0);
    };
    if !path.exists() {
        return Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let format = match cfg.format {
        DataFormat::Auto => RecordFormat::detect(path)?,
        DataFormat::Csv => RecordFormat::Csv,
        DataFormat::Matrix => {
            RecordFormat::Matrix(MatrixDescriptor::from_file(&MatrixDescriptor::sidecar_path(path))?)
        }
    };
    Ok(load_record(path, format)?)
}

fn identify_options(cfg: &RunConfig) -> IdentifyOptions {
    IdentifyOptions {
        solver: cfg.solver.clone(),
        order: cfg.order,
    }
}

fn start(cfg: &RunConfig) -> Result<(IoRecord, HankelParams), CliError> {
    let record = load(cfg)?;
    let params = HankelParams::for_record_len(record.len(), cfg.r, cfg.s)?;
    ensure_dir(&cfg.out)?;
    write_text(&cfg.out.join("config.toml"), &cfg.to_toml())?;
    Ok((record, params))
}

/// Tuning surface; cross-validation also fills in the selected pair.
fn survey(cfg: &RunConfig, record: &IoRecord, params: &HankelParams) -> Result<TuningSurface, CliError> {
    let opts = identify_options(cfg);
    let plan = cfg.tuning.plan();
    match cfg.tuning.method {
        SelectionMethod::CrossValidation => {
            Ok(cross_validate(record, cfg.r, cfg.s, &plan, cfg.tuning.split, &opts)?)
        }
        SelectionMethod::Knee => {
            let op = build_g_operator(record, params)?;
            let bounds = penalty_bounds_for_record(&op, record)?;
            Ok(grid_search(record, params, &plan.grid(bounds)?, &opts)?)
        }
    }
}

fn select(cfg: &RunConfig, surface: &mut TuningSurface) -> Result<Selection, CliError> {
    if let Some(sel) = surface.selected {
        return Ok(sel);
    }
    let others = match cfg.tuning.knee_axis {
        KneeAxis::Nuc => &surface.sparse,
        KneeAxis::Sparse => &surface.nuc,
    };
    let fixed = *others.get(cfg.tuning.knee_fixed).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "tuning.knee_fixed = {} is outside the grid",
            cfg.tuning.knee_fixed
        ))
    })?;
    let sel = select_by_knee(surface, cfg.tuning.knee_axis, fixed)?;
    surface.selected = Some(sel);
    Ok(sel)
}

/// Tuning surface with its selected pair.
pub fn tune_surface(cfg: &RunConfig, record: &IoRecord, params: &HankelParams) -> Result<TuningSurface, CliError> {
    let mut surface = survey(cfg, record, params)?;
    select(cfg, &mut surface)?;
    Ok(surface)
}

fn resolve_penalties(
    cfg: &RunConfig,
    record: &IoRecord,
    params: &HankelParams,
) -> Result<(Penalties, Option<Selection>), CliError> {
    match (cfg.lambda_nuc.value(), cfg.lambda_sparse.value()) {
        (Some(n), Some(s)) => Ok((Penalties::new(n, s)?, None)),
        (n, s) => {
            let surface = tune_surface(cfg, record, params)?;
            let sel = surface.selected.expect("tuning sets a selection");
            let p = Penalties::new(n.unwrap_or(sel.lambda_nuc), s.unwrap_or(sel.lambda_sparse))?;
            Ok((p, Some(sel)))
        }
    }
}

#[derive(Debug, Serialize)]
struct Diagnostics {
    converged: bool,
    iterations: usize,
    objective: f64,
    primal_residual: f64,
    dual_residual: f64,
    rho: f64,
    polished: bool,
    lambda_nuc: f64,
    lambda_sparse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    selection: Option<SelectionMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    no_distinct_knee: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    order: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rank_warning: Option<bool>,
    singular_values: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn identify(cfg: &RunConfig) -> Result<(), CliError> {
    let (record, params) = start(cfg)?;
    let (penalties, selection) = resolve_penalties(cfg, &record, &params)?;
    let op = build_g_operator(&record, &params)?;
    let problem = RobustProblem::from_record(&op, &record, penalties)?;
    let solve = solve_robust(&problem, &cfg.solver)?;
    let mut diag = Diagnostics {
        converged: solve.converged,
        iterations: solve.iterations,
        objective: solve.objective,
        primal_residual: solve.primal_residual,
        dual_residual: solve.dual_residual,
        rho: solve.rho,
        polished: solve.polished,
        lambda_nuc: penalties.lambda_nuc,
        lambda_sparse: penalties.lambda_sparse,
        selection: selection.map(|s| s.method),
        no_distinct_knee: selection.map(|s| s.no_distinct_knee),
        order: None,
        rank_warning: None,
        singular_values: Vec::new(),
        error: None,
    };
    let diag_path = cfg.out.join("diagnostics.toml");
    if !solve.converged {
        let err = Error::NotConverged {
            iterations: solve.iterations,
            primal: solve.primal_residual,
            dual: solve.dual_residual,
        };
        diag.error = Some(err.to_string());
        write_toml(&diag_path, &diag)?;
        return Err(err.into());
    }
    write_series(&cfg.out.join("y_hat.csv"), "y", &solve.y_hat)?;
    write_series(&cfg.out.join("e_hat.csv"), "y", &solve.e_hat)?;
    match realize(&op, &record, solve, cfg.order) {
        Ok(id) => {
            diag.order = Some(id.model.n_x());
            diag.rank_warning = Some(id.rank_warning);
            diag.singular_values = id.split.sigma.iter().chain(&id.split.sigma_tail).copied().collect();
            write_toml(&cfg.out.join("model.toml"), &id.model)?;
            write_toml(&diag_path, &diag)
        }
        Err(e) => {
            diag.error = Some(e.to_string());
            write_toml(&diag_path, &diag)?;
            Err(e.into())
        }
    }
}

pub fn lambda_max(cfg: &RunConfig) -> Result<String, CliError> {
    let (record, params) = start(cfg)?;
    let op = build_g_operator(&record, &params)?;
    let bounds = penalty_bounds_for_record(&op, &record)?;
    let text = toml::to_string(&bounds).map_err(|e| CliError::Config(e.to_string()))?;
    write_text(&cfg.out.join("bounds.toml"), &text)?;
    Ok(text)
}

pub fn tune(cfg: &RunConfig) -> Result<(), CliError> {
    let (record, params) = start(cfg)?;
    let mut surface = survey(cfg, &record, &params)?;
    let path = cfg.out.join("surface.csv");
    let mut buf = Vec::new();
    write_surface_csv(&surface, &mut buf)?;
    std::fs::write(&path, buf).map_err(|e| CliError::io(&path, e))?;
    let sel = select(cfg, &mut surface)?;
    write_toml(&cfg.out.join("selection.toml"), &sel)
}

pub fn inject(cfg: &RunConfig) -> Result<(), CliError> {
    let (record, params) = start(cfg)?;
    let ex = &cfg.experiment;
    let noisy = add_noise(&record, ex.noise_level, cfg.seed)?;
    let plan = OutlierPlan::new(ex.outliers, ex.magnitude, cfg.seed).within(params.s, params.window_len());
    let (corrupted, injected) = inject_outliers(&noisy, &plan)?;
    write_record(&cfg.out.join("clean.csv"), &record)?;
    write_record(&cfg.out.join("corrupted.csv"), &corrupted)?;
    let rows: Vec<Vec<String>> = injected
        .iter()
        .map(|i| {
            vec![
                i.index.to_string(),
                (i.channel + 1).to_string(),
                i.sign.to_string(),
                (f64::from(i.sign) * ex.magnitude).to_string(),
            ]
        })
        .collect();
    write_text(
        &cfg.out.join("injections.csv"),
        &csv_text(&["index", "channel", "sign", "value"], &rows),
    )
}

#[derive(Debug, Serialize)]
struct SeriesRow {
    noise_level: f64,
    outliers: usize,
    rate_mean: f64,
    fp_mean: f64,
    completed: usize,
    unconverged: usize,
}

#[derive(Debug, Serialize)]
struct PenaltyPair {
    lambda_nuc: f64,
    lambda_sparse: f64,
}

#[derive(Debug, Serialize)]
struct BenchmarkSummary {
    /// First table row.
    rate_mean: f64,
    fp_mean: f64,
    iterations: usize,
    seed: u64,
    penalties: PenaltyPair,
    table: Vec<SeriesRow>,
    sweep: Vec<SeriesRow>,
}

fn row(noise_level: f64, outliers: usize, s: &MonteCarloSummary) -> SeriesRow {
    SeriesRow {
        noise_level,
        outliers,
        rate_mean: s.rate_mean,
        fp_mean: s.fp_mean,
        completed: s.completed,
        unconverged: s.unconverged,
    }
}

fn row_fields(r: &SeriesRow) -> Vec<String> {
    vec![
        r.noise_level.to_string(),
        r.outliers.to_string(),
        r.rate_mean.to_string(),
        r.fp_mean.to_string(),
        r.completed.to_string(),
        r.unconverged.to_string(),
    ]
}

fn run_fields(series: &str, noise_level: f64, outliers: usize, r: &RunReport) -> Vec<String> {
    let opt = |v: Option<String>| v.unwrap_or_default();
    vec![
        series.to_string(),
        noise_level.to_string(),
        outliers.to_string(),
        r.iteration.to_string(),
        r.converged.to_string(),
        r.solver_iterations.to_string(),
        r.objective.to_string(),
        opt(r.order.map(|o| o.to_string())),
        opt(r.detection.as_ref().map(|d| d.rate.to_string())),
        opt(r.detection.as_ref().map(|d| d.false_positives.to_string())),
        opt(r.error.clone()),
    ]
}

const SERIES_HEADER: [&str; 6] = ["noise_level", "outliers", "rate_mean", "fp_mean", "completed", "unconverged"];

pub fn benchmark(cfg: &RunConfig) -> Result<(), CliError> {
    let (record, params) = start(cfg)?;
    let ex = &cfg.experiment;
    let (lambda_nuc, lambda_sparse) = cfg.benchmark_penalties();
    let penalties = Penalties::new(lambda_nuc, lambda_sparse)?;
    let opts = identify_options(cfg);

    let mut cache: BTreeMap<(usize, u64), MonteCarloSummary> = BTreeMap::new();
    let mut run = |outliers: usize, noise_level: f64| -> Result<MonteCarloSummary, CliError> {
        let key = (outliers, noise_level.to_bits());
        if let Some(s) = cache.get(&key) {
            return Ok(s.clone());
        }
        let mc = MonteCarloConfig {
            outliers,
            magnitude: ex.magnitude,
            noise_level,
            iterations: ex.iterations,
            seed: cfg.seed,
            threshold: ex.threshold,
        };
        let s = monte_carlo(&record, &params, penalties, &mc, &opts)?;
        cache.insert(key, s.clone());
        Ok(s)
    };

    let mut runs = Vec::new();
    let mut table = Vec::new();
    for &level in &ex.noise_levels {
        let s = run(ex.outliers, level)?;
        runs.extend(s.runs.iter().map(|r| run_fields("table", level, ex.outliers, r)));
        table.push(row(level, ex.outliers, &s));
    }
    let mut sweep = Vec::new();
    for &count in &ex.sweep {
        let s = run(count, ex.noise_level)?;
        runs.extend(s.runs.iter().map(|r| run_fields("sweep", ex.noise_level, count, r)));
        sweep.push(row(ex.noise_level, count, &s));
    }

    let out = &cfg.out;
    let rows = |v: &[SeriesRow]| v.iter().map(row_fields).collect::<Vec<_>>();
    write_text(&out.join("table1.csv"), &csv_text(&SERIES_HEADER, &rows(&table)))?;
    write_text(&out.join("fig2.csv"), &csv_text(&SERIES_HEADER, &rows(&sweep)))?;
    write_text(
        &out.join("runs.csv"),
        &csv_text(
            &[
                "series",
                "noise_level",
                "outliers",
                "iteration",
                "converged",
                "solver_iterations",
                "objective",
                "order",
                "rate",
                "false_positives",
                "error",
            ],
            &runs,
        ),
    )?;
    let summary = BenchmarkSummary {
        rate_mean: table[0].rate_mean,
        fp_mean: table[0].fp_mean,
        iterations: ex.iterations,
        seed: cfg.seed,
        penalties: PenaltyPair {
            lambda_nuc,
            lambda_sparse,
        },
        table,
        sweep,
    };
    write_toml(&out.join("summary.toml"), &summary)
}

/// Simulated outputs as CSV text.
pub fn simulate(model: &Path, input: &Path) -> Result<String, CliError> {
    let text = std::fs::read_to_string(model).map_err(|e| CliError::io(model, e))?;
    let model: StateSpaceModel = toml::from_str(&text).map_err(Error::from)?;
    let u = read_inputs(input)?;
    let y = simulate_checked(&model, &u)?;
    Ok(crate::output::series_text("y", &y))
}
