//! `rsid` command-line front end.
//!
//! Configuration precedence: built-in defaults, then the `--config` TOML file,
//! then command-line flags. Every command writes the resolved configuration
//! to `config.toml` in its output directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rsid_core::{OrderPolicy, SelectionMethod};

use config::{Overrides, Penalty, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "rsid", version, about = "Outlier-robust subspace identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter outliers, realize a model and write it with y_hat and e_hat.
    Identify(Common),
    /// Print the shutoff values of both penalties.
    LambdaMax(Common),
    /// Survey a penalty grid and select a pair.
    Tune {
        #[command(flatten)]
        common: Common,
        /// knee or cv
        #[arg(long, value_parser = parse_method)]
        method: Option<SelectionMethod>,
    },
    /// Add noise and outliers to a record.
    Inject(Common),
    /// Monte Carlo detection-rate table and outlier-count sweep.
    Benchmark(Common),
    /// Simulate a model on an input file.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        /// CSV with columns u1..um
        #[arg(long)]
        input: PathBuf,
        /// Directory for simulated.csv; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Number or "auto".
    #[arg(long)]
    pub lambda_nuc: Option<Penalty>,
    /// Number or "auto".
    #[arg(long)]
    pub lambda_sparse: Option<Penalty>,
    #[arg(long = "r")]
    pub r: Option<usize>,
    #[arg(long = "s")]
    pub s: Option<usize>,
    /// gap, fixed:N or threshold:T
    #[arg(long)]
    pub order: Option<OrderPolicy>,
}

fn parse_method(s: &str) -> Result<SelectionMethod, String> {
    match s {
        "knee" => Ok(SelectionMethod::Knee),
        "cv" => Ok(SelectionMethod::CrossValidation),
        _ => Err(format!("expected 'knee' or 'cv', got '{s}'")),
    }
}

impl Common {
    fn overrides(&self, method: Option<SelectionMethod>) -> Overrides {
        Overrides {
            data: self.data.clone(),
            out: self.out.clone(),
            seed: self.seed,
            jobs: self.jobs,
            lambda_nuc: self.lambda_nuc,
            lambda_sparse: self.lambda_sparse,
            r: self.r,
            s: self.s,
            order: self.order,
            method,
        }
    }

    pub fn resolve(&self, method: Option<SelectionMethod>) -> Result<RunConfig, CliError> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides(method))
    }
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(f)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let (common, method) = match &cli.command {
        Command::Simulate { model, input, out } => {
            let text = commands::simulate(model, input)?;
            return match out {
                Some(dir) => {
                    output::ensure_dir(dir)?;
                    output::write_text(&dir.join("simulated.csv"), &text)
                }
                None => {
                    print!("{text}");
                    Ok(())
                }
            };
        }
        Command::Tune { common, method } => (common, *method),
        Command::Identify(c) | Command::LambdaMax(c) | Command::Inject(c) | Command::Benchmark(c) => (c, None),
    };
    let cfg = common.resolve(method)?;
    in_pool(cfg.jobs, || match &cli.command {
        Command::Identify(_) => commands::identify(&cfg),
        Command::LambdaMax(_) => commands::lambda_max(&cfg).map(|text| print!("{text}")),
        Command::Tune { .. } => commands::tune(&cfg),
        Command::Inject(_) => commands::inject(&cfg),
        Command::Benchmark(_) => commands::benchmark(&cfg),
        Command::Simulate { .. } => unreachable!(),
    })
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("rsid: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "rsid",
            "tune",
            "--method",
            "cv",
            "--lambda-nuc",
            "auto",
            "--lambda-sparse",
            "2.5",
            "--order",
            "fixed:3",
            "--r",
            "4",
        ])
        .unwrap();
        let Command::Tune { common, method } = cli.command else {
            panic!("wrong subcommand")
        };
        let cfg = common.resolve(method).unwrap();
        assert_eq!(cfg.tuning.method, SelectionMethod::CrossValidation);
        assert_eq!(cfg.lambda_nuc, Penalty::Auto);
        assert_eq!(cfg.lambda_sparse, Penalty::Value(2.5));
        assert_eq!(cfg.order, OrderPolicy::Fixed(3));
        assert_eq!(cfg.r, 4);
        assert_eq!(cfg.s, 5);
    }

    #[test]
    fn bad_flags_are_usage_errors() {
        assert_eq!(run(["rsid", "identify", "--order", "wild"]), 1);
        assert_eq!(run(["rsid", "frobnicate"]), 1);
        assert_eq!(run(["rsid", "tune", "--method", "elbow"]), 1);
    }
}
