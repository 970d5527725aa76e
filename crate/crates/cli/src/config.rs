//! Run configuration: defaults, then the `--config` file, then flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rsid_core::harness::SyntheticBenchmark;
use rsid_core::{KneeAxis, OrderPolicy, SelectionMethod, SolveOptions, Spacing, TuningPlan};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// A penalty weight, or `"auto"` to pick it by tuning.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Penalty {
    #[default]
    Auto,
    Value(f64),
}

impl Penalty {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Auto => None,
            Self::Value(v) => Some(v),
        }
    }
}

impl fmt::Display for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Value(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for Penalty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        let v: f64 = s.parse().map_err(|_| format!("expected 'auto' or a number, got '{s}'"))?;
        if !(v >= 0.0) {
            return Err(format!("penalty must be >= 0, got {v}"));
        }
        Ok(Self::Value(v))
    }
}

impl Serialize for Penalty {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Auto => s.serialize_str("auto"),
            Self::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Penalty {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Num(v) => v.to_string().parse(),
            Raw::Int(v) => v.to_string().parse(),
            Raw::Text(t) => t.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// `.csv` by extension, otherwise a matrix file with a sidecar.
    #[default]
    Auto,
    Csv,
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub method: SelectionMethod,
    pub n_nuc: usize,
    pub n_sparse: usize,
    pub spacing: Spacing,
    /// Training fraction for cross-validation.
    pub split: f64,
    /// Penalty that varies along the knee slice.
    pub knee_axis: KneeAxis,
    /// Grid index of the other penalty on the knee slice.
    pub knee_fixed: usize,
}

impl TuningConfig {
    pub fn plan(&self) -> TuningPlan {
        TuningPlan {
            n_nuc: self.n_nuc,
            n_sparse: self.n_sparse,
            spacing: self.spacing,
        }
    }
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            method: SelectionMethod::Knee,
            n_nuc: 20,
            n_sparse: 20,
            spacing: Spacing::Linear,
            split: 0.9,
            knee_axis: KneeAxis::Nuc,
            knee_fixed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub outliers: usize,
    pub magnitude: f64,
    /// Noise added by `inject` and used for the outlier-count sweep.
    pub noise_level: f64,
    /// One table row per level.
    pub noise_levels: Vec<f64>,
    pub iterations: usize,
    /// Detection threshold; half the magnitude when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Outlier counts for the detection-rate curve.
    pub sweep: Vec<usize>,
    /// Penalties for `benchmark` when the top-level ones are `auto`.
    pub lambda_nuc: f64,
    pub lambda_sparse: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            outliers: 3,
            magnitude: 20.0,
            noise_level: 0.0,
            noise_levels: vec![0.0, 0.1, 0.2, 0.3],
            iterations: 50,
            threshold: None,
            sweep: vec![3, 10, 20, 35, 50],
            lambda_nuc: 1.0,
            lambda_sparse: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Record to load; the synthetic benchmark when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub format: DataFormat,
    pub r: usize,
    pub s: usize,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub out: PathBuf,
    pub order: OrderPolicy,
    pub lambda_nuc: Penalty,
    pub lambda_sparse: Penalty,
    pub solver: SolveOptions,
    pub tuning: TuningConfig,
    pub experiment: ExperimentConfig,
    pub benchmark: SyntheticBenchmark,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            format: DataFormat::Auto,
            r: 5,
            s: 5,
            seed: 1,
            jobs: 0,
            out: PathBuf::from("rsid-out"),
            order: OrderPolicy::Gap,
            lambda_nuc: Penalty::Auto,
            lambda_sparse: Penalty::Auto,
            solver: SolveOptions::default(),
            tuning: TuningConfig::default(),
            experiment: ExperimentConfig::default(),
            benchmark: SyntheticBenchmark::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub lambda_nuc: Option<Penalty>,
    pub lambda_sparse: Option<Penalty>,
    pub r: Option<usize>,
    pub s: Option<usize>,
    pub order: Option<OrderPolicy>,
    pub method: Option<SelectionMethod>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Defaults, then `file`, then `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.data {
            self.data = Some(v.clone());
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        macro_rules! set {
            ($($field:ident => $target:expr),*) => {$(
                if let Some(v) = o.$field {
                    $target = v;
                }
            )*};
        }
        set!(
            seed => self.seed,
            jobs => self.jobs,
            lambda_nuc => self.lambda_nuc,
            lambda_sparse => self.lambda_sparse,
            r => self.r,
            s => self.s,
            order => self.order,
            method => self.tuning.method
        );
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.solver.validate()?;
        for p in [self.lambda_nuc, self.lambda_sparse] {
            if let Penalty::Value(v) = p {
                if !(v >= 0.0) {
                    return Err(CliError::Config(format!("penalty must be >= 0, got {v}")));
                }
            }
        }
        if !(self.tuning.split > 0.0 && self.tuning.split < 1.0) {
            return Err(CliError::Config("tuning.split must lie in (0, 1)".into()));
        }
        if self.experiment.noise_levels.is_empty() {
            return Err(CliError::Config("experiment.noise_levels is empty".into()));
        }
        Ok(())
    }

    /// The resolved configuration as TOML, for the output directory.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Explicit top-level penalties, else the experiment ones.
    pub fn benchmark_penalties(&self) -> (f64, f64) {
        (
            self.lambda_nuc.value().unwrap_or(self.experiment.lambda_nuc),
            self.lambda_sparse.value().unwrap_or(self.experiment.lambda_sparse),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.r, 5);
        assert_eq!(cfg.s, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("rr = 3").is_err());
        assert!(RunConfig::from_toml("[solver]\nmaxiter = 3").is_err());
        assert!(RunConfig::from_toml("[tuning]\nn_nuc = 4\nbogus = 1").is_err());
    }

    #[test]
    fn penalties_parse() {
        let cfg = RunConfig::from_toml("lambda_nuc = 2\nlambda_sparse = \"auto\"").unwrap();
        assert_eq!(cfg.lambda_nuc, Penalty::Value(2.0));
        assert_eq!(cfg.lambda_sparse, Penalty::Auto);
        let cfg = RunConfig::from_toml("lambda_nuc = 0.5").unwrap();
        assert_eq!(cfg.lambda_nuc, Penalty::Value(0.5));
        assert!(RunConfig::from_toml("lambda_nuc = -1").is_err());
        assert!(RunConfig::from_toml("lambda_nuc = \"big\"").is_err());
        assert_eq!("auto".parse::<Penalty>().unwrap(), Penalty::Auto);
    }

    #[test]
    fn flags_override_file() {
        let text = "r = 4\nseed = 9\norder = \"fixed:2\"\n[tuning]\nmethod = \"knee\"\nn_nuc = 3";
        let mut cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.tuning.n_nuc, 3);
        cfg.apply(&Overrides {
            seed: Some(11),
            method: Some(SelectionMethod::CrossValidation),
            ..Default::default()
        });
        assert_eq!(cfg.r, 4);
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.order, OrderPolicy::Fixed(2));
        assert_eq!(cfg.tuning.method, SelectionMethod::CrossValidation);
    }

    #[test]
    fn benchmark_penalties_fall_back() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.benchmark_penalties(), (1.0, 1.0));
        cfg.lambda_sparse = Penalty::Value(3.0);
        assert_eq!(cfg.benchmark_penalties(), (1.0, 3.0));
    }
}
