//! Data ingestion, outlier and noise injection, detection metrics and
//! Monte Carlo experiments.
//!
//! Every randomized operation is a pure function of its seed. Monte Carlo
//! iteration `i` draws from stream `i` of a ChaCha generator keyed by the
//! master seed, so results do not depend on scheduling.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Complex, DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hankel::{build_g_operator, HankelParams, IoRecord};
use crate::realization::{realize, simulate, IdentifyOptions, StateSpaceModel};
use crate::solver::{solve_robust, Penalties, RobustProblem};

pub const DEFAULT_MAGNITUDE: f64 = 20.0;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// Loading and writing records

/// Layout of a whitespace-separated numeric matrix file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixDescriptor {
    pub inputs: usize,
    pub outputs: usize,
    /// Leading columns to drop (e.g. a time stamp).
    #[serde(default)]
    pub skip_columns: usize,
}

impl MatrixDescriptor {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    /// Sidecar location: the data path with `.toml` appended.
    pub fn sidecar_path(data: &Path) -> PathBuf {
        let mut s = data.as_os_str().to_owned();
        s.push(".toml");
        PathBuf::from(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    /// Header row naming `u1..u_m` and `y1..y_p`.
    Csv,
    /// Bare numeric rows laid out as `[skip | u | y]`.
    Matrix(MatrixDescriptor),
}

impl RecordFormat {
    /// CSV for `.csv` files, otherwise a matrix with its sidecar descriptor.
    pub fn detect(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            return Ok(Self::Csv);
        }
        let sidecar = MatrixDescriptor::sidecar_path(path);
        if !sidecar.exists() {
            return Err(Error::InvalidParameter(format!(
                "no descriptor {} for matrix file",
                sidecar.display()
            )));
        }
        Ok(Self::Matrix(MatrixDescriptor::from_file(&sidecar)?))
    }
}

pub fn load_record(path: &Path, format: RecordFormat) -> Result<IoRecord> {
    let file = std::fs::File::open(path)?;
    match format {
        RecordFormat::Csv => read_csv_record(file),
        RecordFormat::Matrix(desc) => read_matrix_record(BufReader::new(file), desc),
    }
}

/// Builds a record from rows of `(u, y)`; a NaN anywhere in `y` marks the
/// sample unobserved.
fn assemble(rows: Vec<(Vec<f64>, Vec<f64>)>, n_m: usize, n_p: usize) -> Result<IoRecord> {
    let len = rows.len();
    let mut u = DMatrix::zeros(n_m, len);
    let mut y = DMatrix::zeros(n_p, len);
    let mut observed = vec![true; len];
    for (k, (ur, yr)) in rows.into_iter().enumerate() {
        for (i, v) in ur.into_iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: k + 1,
                    msg: format!("input u{} is not finite", i + 1),
                });
            }
            u[(i, k)] = v;
        }
        for (i, v) in yr.into_iter().enumerate() {
            if v.is_nan() {
                observed[k] = false;
            }
            y[(i, k)] = v;
        }
    }
    IoRecord::new(u, y, observed)
}

fn parse_value(field: &str, line: usize) -> Result<f64> {
    let t = field.trim();
    if t.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    t.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("not a number: '{t}'"),
    })
}

pub fn read_csv_record<R: Read>(reader: R) -> Result<IoRecord> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut u_cols = Vec::new();
    let mut y_cols = Vec::new();
    for (col, name) in headers.iter().enumerate() {
        let parsed = name
            .get(1..)
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1);
        match (name.chars().next(), parsed) {
            (Some('u'), Some(n)) => u_cols.push((n, col)),
            (Some('y'), Some(n)) => y_cols.push((n, col)),
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("unexpected column '{name}'"),
                })
            }
        }
    }
    u_cols.sort_unstable();
    y_cols.sort_unstable();
    let contiguous = |cols: &[(usize, usize)]| cols.iter().enumerate().all(|(i, &(n, _))| n == i + 1);
    if u_cols.is_empty() || y_cols.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "need at least one u and one y column".into(),
        });
    }
    if !contiguous(&u_cols) || !contiguous(&y_cols) {
        return Err(Error::Parse {
            line: 1,
            msg: "columns must be numbered u1..um and y1..yp".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, got {}", headers.len(), rec.len()),
            });
        }
        let u = u_cols
            .iter()
            .map(|&(_, c)| parse_value(&rec[c], line))
            .collect::<Result<Vec<_>>>()?;
        let y = y_cols
            .iter()
            .map(|&(_, c)| parse_value(&rec[c], line))
            .collect::<Result<Vec<_>>>()?;
        rows.push((u, y));
    }
    assemble(rows, u_cols.len(), y_cols.len())
}

pub fn read_matrix_record<R: BufRead>(reader: R, desc: MatrixDescriptor) -> Result<IoRecord> {
    if desc.inputs == 0 || desc.outputs == 0 {
        return Err(Error::InvalidParameter("descriptor needs inputs >= 1 and outputs >= 1".into()));
    }
    let width = desc.skip_columns + desc.inputs + desc.outputs;
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') || text.starts_with('%') {
            continue;
        }
        let vals = text
            .split_whitespace()
            .map(|f| parse_value(f, i + 1))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != width {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {width} columns, got {}", vals.len()),
            });
        }
        let u = vals[desc.skip_columns..desc.skip_columns + desc.inputs].to_vec();
        let y = vals[desc.skip_columns + desc.inputs..].to_vec();
        rows.push((u, y));
    }
    assemble(rows, desc.inputs, desc.outputs)
}

/// CSV with `u1..,y1..` header; unobserved samples are written as NaN.
pub fn write_csv_record<W: Write>(record: &IoRecord, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=record.n_inputs()).map(|i| format!("u{i}")).collect();
    header.extend((1..=record.n_outputs()).map(|i| format!("y{i}")));
    w.write_record(&header)?;
    for k in 0..record.len() {
        let mut fields: Vec<String> = record.inputs().column(k).iter().map(|v| v.to_string()).collect();
        for v in record.outputs().column(k).iter() {
            fields.push(if record.observed()[k] {
                v.to_string()
            } else {
                "NaN".to_string()
            });
        }
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

/// Random stable system with spectral radius `radius`.
pub fn random_stable_system<R: Rng>(rng: &mut R, n_x: usize, n_m: usize, n_p: usize, radius: f64) -> StateSpaceModel {
    let mut gauss = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng));
    let mut a: DMatrix<f64> = gauss(n_x, n_x);
    let b = gauss(n_x, n_m);
    let c = gauss(n_p, n_x);
    let d = gauss(n_p, n_m);
    if n_x > 0 {
        let rho = a
            .complex_eigenvalues()
            .iter()
            .map(|z: &Complex<f64>| z.norm())
            .fold(0.0, f64::max);
        if rho > 0.0 {
            a *= radius / rho;
        }
    }
    let x0 = DVector::zeros(n_x);
    StateSpaceModel { a, b, c, d, x0 }
}

/// Synthetic stand-in for the distillation benchmark: a random stable system
/// driven by white Gaussian input, outputs scaled to `peak`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticBenchmark {
    pub order: usize,
    pub inputs: usize,
    pub outputs: usize,
    /// Samples in the identification window.
    pub window: usize,
    /// Leading samples reserved for the instruments.
    pub past: usize,
    pub radius: f64,
    pub peak: f64,
    pub seed: u64,
}

impl Default for SyntheticBenchmark {
    fn default() -> Self {
        Self {
            order: 3,
            inputs: 5,
            outputs: 3,
            window: 85,
            past: 5,
            radius: 0.9,
            peak: 9.5,
            seed: 2014,
        }
    }
}

impl SyntheticBenchmark {
    /// Record of `past + window` samples and the model generating it (with
    /// `x0` referring to raw sample 0).
    pub fn generate(&self) -> (IoRecord, StateSpaceModel) {
        let mut rng = rng_for(self.seed, 0);
        let mut model = random_stable_system(&mut rng, self.order, self.inputs, self.outputs, self.radius);
        model.x0 = DVector::from_fn(self.order, |_, _| StandardNormal.sample(&mut rng));
        let len = self.past + self.window;
        let u = DMatrix::from_fn(self.inputs, len, |_, _| StandardNormal.sample(&mut rng));
        let y = simulate(&model, &u);
        let peak = y.amax();
        if peak > 0.0 {
            let scale = self.peak / peak;
            model.c *= scale;
            model.d *= scale;
        }
        let y = simulate(&model, &u);
        let record = IoRecord::fully_observed(u, y).expect("consistent shapes");
        (record, model)
    }

    pub fn hankel_params(&self, r: usize) -> Result<HankelParams> {
        HankelParams::for_record_len(self.past + self.window, r, self.past)
    }
}

// ---------------------------------------------------------------------------
// Injection

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Injection {
    /// Raw record index.
    pub index: usize,
    pub channel: usize,
    /// +1 or -1.
    pub sign: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierPlan {
    pub count: usize,
    pub magnitude: f64,
    pub seed: u64,
    /// Eligible raw indices `[start, start + len)`; the whole record if `None`.
    pub window: Option<(usize, usize)>,
}

impl OutlierPlan {
    pub fn new(count: usize, magnitude: f64, seed: u64) -> Self {
        Self {
            count,
            magnitude,
            seed,
            window: None,
        }
    }

    pub fn within(mut self, start: usize, len: usize) -> Self {
        self.window = Some((start, len));
        self
    }
}

/// Adds or subtracts `magnitude` at `count` distinct random samples, one
/// random channel each. Returns the corrupted record and the injections
/// sorted by index.
pub fn inject_outliers(record: &IoRecord, plan: &OutlierPlan) -> Result<(IoRecord, Vec<Injection>)> {
    let (start, len) = plan.window.unwrap_or((0, record.len()));
    if start + len > record.len() {
        return Err(Error::RecordTooShort {
            needed: start + len,
            available: record.len(),
        });
    }
    if plan.count > len {
        return Err(Error::InvalidParameter(format!(
            "cannot place {} outliers in {len} samples",
            plan.count
        )));
    }
    let mut rng = rng_for(plan.seed, 0);
    let picks = index::sample(&mut rng, len, plan.count);
    let mut out = record.clone();
    let mut injected = Vec::with_capacity(plan.count);
    for k in picks.iter() {
        let channel = rng.random_range(0..record.n_outputs());
        let sign: i8 = if rng.random_bool(0.5) { 1 } else { -1 };
        let index = start + k;
        out.outputs_mut()[(channel, index)] += f64::from(sign) * plan.magnitude;
        injected.push(Injection { index, channel, sign });
    }
    injected.sort_unstable();
    Ok((out, injected))
}

/// Adds white Gaussian noise to every output channel with standard deviation
/// `level * std(channel)`, the sample std over observed samples.
pub fn add_noise(record: &IoRecord, level: f64, seed: u64) -> Result<IoRecord> {
    if !(level >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise level must be >= 0, got {level}")));
    }
    if level == 0.0 {
        return Ok(record.clone());
    }
    let obs = record.observed_indices();
    if obs.len() < 2 {
        return Err(Error::Degenerate("need two observed samples for a noise scale".into()));
    }
    let mut rng = rng_for(seed, 1);
    let mut out = record.clone();
    for c in 0..record.n_outputs() {
        let vals: Vec<f64> = obs.iter().map(|&k| record.outputs()[(c, k)]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        let sd = level * var.sqrt();
        let normal = Normal::new(0.0, sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        for k in 0..record.len() {
            out.outputs_mut()[(c, k)] += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Detection

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub rate: f64,
    pub false_positives: usize,
    pub detected: BTreeSet<usize>,
    pub truth: BTreeSet<usize>,
    pub threshold: f64,
}

/// Reporting threshold used when none is given.
pub fn default_threshold(magnitude: f64) -> f64 {
    0.5 * magnitude
}

/// Threshold when the outlier magnitude is unknown: the larger of ten times
/// the median nonzero `|e_hat|` entry and `1e-3 * max|y|`.
pub fn adaptive_threshold(e_hat: &DMatrix<f64>, y_meas: &DMatrix<f64>) -> f64 {
    let mut nz: Vec<f64> = e_hat.iter().map(|v| v.abs()).filter(|&v| v > 0.0).collect();
    let floor = 1e-3 * y_meas.amax();
    if nz.is_empty() {
        return floor.max(f64::MIN_POSITIVE);
    }
    nz.sort_by(f64::total_cmp);
    let m = nz.len();
    let median = if m % 2 == 1 {
        nz[m / 2]
    } else {
        0.5 * (nz[m / 2 - 1] + nz[m / 2])
    };
    (10.0 * median).max(floor).max(f64::MIN_POSITIVE)
}

/// Compares the time indices where any channel of `|e_hat|` exceeds
/// `threshold` with the true outlier times (same time base as `e_hat`).
pub fn detection_report(e_hat: &DMatrix<f64>, truth: &[usize], threshold: f64) -> Result<DetectionReport> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidParameter("threshold must be positive".into()));
    }
    let truth: BTreeSet<usize> = truth.iter().copied().collect();
    if truth.is_empty() {
        return Err(Error::Degenerate("no true outliers; detection rate undefined".into()));
    }
    let detected: BTreeSet<usize> = (0..e_hat.ncols())
        .filter(|&k| e_hat.column(k).iter().any(|v| v.abs() > threshold))
        .collect();
    let hits = detected.intersection(&truth).count();
    let false_positives = detected.difference(&truth).count();
    Ok(DetectionReport {
        rate: hits as f64 / truth.len() as f64,
        false_positives,
        detected,
        truth,
        threshold,
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub outliers: usize,
    pub magnitude: f64,
    pub noise_level: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Detection threshold; `0.5 * magnitude` when absent.
    pub threshold: Option<f64>,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            outliers: 3,
            magnitude: DEFAULT_MAGNITUDE,
            noise_level: 0.0,
            iterations: 50,
            seed: 0,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub iteration: usize,
    pub converged: bool,
    pub solver_iterations: usize,
    pub objective: f64,
    /// Order of the realized model, if realization succeeded.
    pub order: Option<usize>,
    pub detection: Option<DetectionReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub rate_mean: f64,
    pub fp_mean: f64,
    /// Runs that contributed to the means.
    pub completed: usize,
    /// Runs whose solver did not converge.
    pub unconverged: usize,
    pub runs: Vec<RunReport>,
}

fn run_once(
    clean: &IoRecord,
    params: &HankelParams,
    penalties: Penalties,
    cfg: &MonteCarloConfig,
    opts: &IdentifyOptions,
    iteration: usize,
) -> Result<RunReport> {
    let mut rng = rng_for(cfg.seed, iteration as u64);
    let noise_seed: u64 = rng.random();
    let outlier_seed: u64 = rng.random();

    let noisy = add_noise(clean, cfg.noise_level, noise_seed)?;
    let start = params.s;
    let plan = OutlierPlan::new(cfg.outliers, cfg.magnitude, outlier_seed).within(start, params.window_len());
    let (corrupted, injected) = inject_outliers(&noisy, &plan)?;
    let truth: Vec<usize> = injected.iter().map(|i| i.index - start).collect();

    let op = build_g_operator(&corrupted, params)?;
    let problem = RobustProblem::from_record(&op, &corrupted, penalties)?;
    let solve = solve_robust(&problem, &opts.solver)?;
    let mut report = RunReport {
        iteration,
        converged: solve.converged,
        solver_iterations: solve.iterations,
        objective: solve.objective,
        order: None,
        detection: None,
        error: None,
    };
    if !solve.converged {
        report.error = Some("solver did not converge".into());
        return Ok(report);
    }
    let threshold = cfg.threshold.unwrap_or_else(|| default_threshold(cfg.magnitude));
    report.detection = Some(detection_report(&solve.e_hat, &truth, threshold)?);
    match realize(&op, &corrupted, solve, opts.order) {
        Ok(id) => report.order = Some(id.model.n_x()),
        Err(e) => report.error = Some(format!("realization failed: {e}")),
    }
    Ok(report)
}

/// Repeats injection, filtering, realization and scoring `iterations` times.
/// Runs in parallel on the current rayon pool; the result does not depend on
/// the number of workers.
pub fn monte_carlo(
    clean: &IoRecord,
    params: &HankelParams,
    penalties: Penalties,
    cfg: &MonteCarloConfig,
    opts: &IdentifyOptions,
) -> Result<MonteCarloSummary> {
    if cfg.iterations == 0 {
        return Err(Error::InvalidParameter("iterations must be >= 1".into()));
    }
    if cfg.outliers == 0 {
        return Err(Error::Degenerate("no true outliers; detection rate undefined".into()));
    }
    params.validate(clean.len())?;
    let runs = (0..cfg.iterations)
        .into_par_iter()
        .map(|i| run_once(clean, params, penalties, cfg, opts, i))
        .collect::<Result<Vec<_>>>()?;

    let scored: Vec<&DetectionReport> = runs.iter().filter_map(|r| r.detection.as_ref()).collect();
    let completed = scored.len();
    let (rate_mean, fp_mean) = if completed == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (
            scored.iter().map(|d| d.rate).sum::<f64>() / completed as f64,
            scored.iter().map(|d| d.false_positives as f64).sum::<f64>() / completed as f64,
        )
    };
    Ok(MonteCarloSummary {
        rate_mean,
        fp_mean,
        completed,
        unconverged: runs.iter().filter(|r| !r.converged).count(),
        runs,
    })
}

/// Mean detection rate for each outlier count.
pub fn outlier_sweep(
    clean: &IoRecord,
    params: &HankelParams,
    penalties: Penalties,
    counts: &[usize],
    cfg: &MonteCarloConfig,
    opts: &IdentifyOptions,
) -> Result<Vec<(usize, MonteCarloSummary)>> {
    counts
        .iter()
        .map(|&count| {
            let cfg = MonteCarloConfig {
                outliers: count,
                ..cfg.clone()
            };
            monte_carlo(clean, params, penalties, &cfg, opts).map(|s| (count, s))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_record() -> IoRecord {
        let u = DMatrix::from_fn(1, 30, |_, k| (k as f64 * 0.7).sin());
        let y = DMatrix::from_fn(2, 30, |c, k| (k as f64 * 0.3 + c as f64).cos());
        IoRecord::fully_observed(u, y).unwrap()
    }

    #[test]
    fn csv_loading() {
        let text = "u1,y1\n1.0,2.0\n2.0,NaN\n3.0,4.5\n";
        let rec = read_csv_record(text.as_bytes()).unwrap();
        assert_eq!(rec.len(), 3);
        assert_eq!(rec.observed(), &[true, false, true]);
        assert_eq!(rec.outputs()[(0, 2)], 4.5);

        let reordered = "y2,u1,y1\n5,1,2\n";
        let rec = read_csv_record(reordered.as_bytes()).unwrap();
        assert_eq!(rec.outputs().column(0).as_slice(), &[2.0, 5.0]);

        assert!(read_csv_record("u1,y1\n1.0\n".as_bytes()).is_err());
        assert!(read_csv_record("u1,y1\n1.0,abc\n".as_bytes()).is_err());
        assert!(read_csv_record("u1,z1\n1.0,2.0\n".as_bytes()).is_err());
        assert!(read_csv_record("u1,u2\n1.0,2.0\n".as_bytes()).is_err());
        assert!(read_csv_record("u1,y2\n1.0,2.0\n".as_bytes()).is_err());
        assert!(read_csv_record("u1,y1\nNaN,2.0\n".as_bytes()).is_err());
    }

    #[test]
    fn matrix_loading() {
        let desc = MatrixDescriptor {
            inputs: 2,
            outputs: 1,
            skip_columns: 1,
        };
        let text = "% header\n0 1.0 2.0 3.0\n1 4.0 5.0 NaN\n\n";
        let rec = read_matrix_record(text.as_bytes(), desc).unwrap();
        assert_eq!(rec.len(), 2);
        assert_eq!(rec.inputs().column(1).as_slice(), &[4.0, 5.0]);
        assert_eq!(rec.observed(), &[true, false]);
        assert!(read_matrix_record("1 2 3\n".as_bytes(), desc).is_err());
        let none = MatrixDescriptor { outputs: 0, ..desc };
        assert!(read_matrix_record(text.as_bytes(), none).is_err());
    }

    #[test]
    fn csv_write_read_round_trip() {
        let mut rec = small_record();
        rec = IoRecord::new(rec.inputs().clone(), rec.outputs().clone(), {
            let mut m = vec![true; 30];
            m[4] = false;
            m
        })
        .unwrap();
        let mut buf = Vec::new();
        write_csv_record(&rec, &mut buf).unwrap();
        let back = read_csv_record(buf.as_slice()).unwrap();
        assert_eq!(back.inputs(), rec.inputs());
        assert_eq!(back.observed(), rec.observed());
        for k in rec.observed_indices() {
            assert_eq!(back.outputs().column(k), rec.outputs().column(k));
        }
    }

    #[test]
    fn injection_is_deterministic_and_exact() {
        let rec = small_record();
        let (same, none) = inject_outliers(&rec, &OutlierPlan::new(0, 20.0, 1)).unwrap();
        assert_eq!(same, rec);
        assert!(none.is_empty());

        let plan = OutlierPlan::new(5, 20.0, 42).within(5, 20);
        let (a, ia) = inject_outliers(&rec, &plan).unwrap();
        let (b, ib) = inject_outliers(&rec, &plan).unwrap();
        assert_eq!(a, b);
        assert_eq!(ia, ib);
        let times: BTreeSet<usize> = ia.iter().map(|i| i.index).collect();
        assert_eq!(times.len(), 5);
        assert!(times.iter().all(|&t| (5..25).contains(&t)));
        let diff = a.outputs() - rec.outputs();
        for inj in &ia {
            assert!((diff[(inj.channel, inj.index)] - 20.0 * f64::from(inj.sign)).abs() < 1e-12);
        }
        assert_eq!(diff.iter().filter(|v| v.abs() > 0.0).count(), 5);
        assert!(inject_outliers(&rec, &OutlierPlan::new(31, 20.0, 1)).is_err());
    }

    #[test]
    fn noise_scales_with_channel_std() {
        let mut rng = rng_for(7, 0);
        let y = DMatrix::from_fn(1, 1000, |_, _| { let z: f64 = StandardNormal.sample(&mut rng); 3.0 * z });
        let rec = IoRecord::fully_observed(DMatrix::zeros(1, 1000), y).unwrap();
        assert_eq!(add_noise(&rec, 0.0, 1).unwrap(), rec);
        let a = add_noise(&rec, 0.1, 5).unwrap();
        assert_eq!(a, add_noise(&rec, 0.1, 5).unwrap());
        let noise = a.outputs() - rec.outputs();
        let mean = noise.mean();
        let sd = (noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
        let ys = rec.outputs();
        let ym = ys.mean();
        let ysd = (ys.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / 999.0).sqrt();
        assert!((sd / (0.1 * ysd) - 1.0).abs() < 0.1, "sd ratio {}", sd / (0.1 * ysd));
        assert!(add_noise(&rec, -0.1, 5).is_err());
    }

    #[test]
    fn detection_examples() {
        let mut e = DMatrix::zeros(2, 25);
        e[(0, 3)] = 19.0;
        e[(1, 10)] = -18.0;
        let r = detection_report(&e, &[3, 10], 10.0).unwrap();
        assert_eq!((r.rate, r.false_positives), (1.0, 0));

        let mut e = DMatrix::zeros(1, 25);
        e[(0, 3)] = 19.0;
        let r = detection_report(&e, &[3, 10, 20], 10.0).unwrap();
        assert!((r.rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.false_positives, 0);

        e[(0, 7)] = 12.0;
        let r = detection_report(&e, &[3], 10.0).unwrap();
        assert_eq!(r.false_positives, 1);

        assert!(detection_report(&e, &[], 10.0).is_err());
        let y = DMatrix::from_element(1, 25, 2.0);
        assert_eq!(adaptive_threshold(&DMatrix::zeros(1, 25), &y), 2e-3);
        let mut e = DMatrix::zeros(1, 25);
        e[(0, 0)] = 1e-9;
        e[(0, 1)] = 3e-9;
        e[(0, 2)] = 20.0;
        assert_eq!(adaptive_threshold(&e, &y), 3e-8_f64.max(2e-3));
        assert!((adaptive_threshold(&e, &DMatrix::from_element(1, 1, 1e-6)) - 3e-8).abs() < 1e-20);
        assert!(detection_report(&e, &[3], 0.0).is_err());
    }

    #[test]
    fn synthetic_benchmark_matches_requested_shape() {
        let bench = SyntheticBenchmark::default();
        let (rec, model) = bench.generate();
        assert_eq!(rec.len(), 90);
        assert_eq!(rec.n_outputs(), 3);
        assert!((rec.outputs().amax() - bench.peak).abs() < 1e-9);
        let rho = model
            .a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!((rho - 0.9).abs() < 1e-9);
        assert_eq!(bench.generate().0, rec);
        assert_eq!(bench.hankel_params(5).unwrap().n, 81);
    }

    #[test]
    fn monte_carlo_rejects_degenerate_configs() {
        let bench = SyntheticBenchmark::default();
        let (rec, _) = bench.generate();
        let params = bench.hankel_params(5).unwrap();
        let pen = Penalties::new(1.0, 1.0).unwrap();
        let opts = IdentifyOptions::default();
        let zero_out = MonteCarloConfig {
            outliers: 0,
            iterations: 1,
            ..Default::default()
        };
        assert!(monte_carlo(&rec, &params, pen, &zero_out, &opts).is_err());
        let zero_iter = MonteCarloConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(monte_carlo(&rec, &params, pen, &zero_iter, &opts).is_err());
    }
}
