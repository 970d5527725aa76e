use std::path::{Path, PathBuf};

use rsid_core::Error;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_DEGENERATE: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => EXIT_USAGE,
            Self::Io { .. } => EXIT_IO,
            Self::Core(e) => core_exit_code(e),
        }
    }
}

pub fn core_exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter(_) | Error::IndexOutOfRange(_) => EXIT_USAGE,
        Error::Io(_) | Error::Csv(_) | Error::Toml(_) | Error::Parse { .. } => EXIT_IO,
        Error::NotConverged { .. } | Error::UnconvergedSlice(_) => EXIT_NOT_CONVERGED,
        Error::RecordTooShort { .. }
        | Error::ShapeMismatch(_)
        | Error::InstrumentsAnnihilated
        | Error::SvdFailed
        | Error::DualCertificateInfeasible { .. }
        | Error::NoSignificantGap
        | Error::EmptyTuningRegion
        | Error::Degenerate(_) => EXIT_DEGENERATE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct_per_class() {
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "x");
        assert_eq!(CliError::io(Path::new("a"), io).exit_code(), 2);
        assert_eq!(CliError::Config("x".into()).exit_code(), 1);
        let nc = Error::NotConverged {
            iterations: 1,
            primal: 1.0,
            dual: 1.0,
        };
        assert_eq!(CliError::from(nc).exit_code(), 3);
        assert_eq!(CliError::from(Error::EmptyTuningRegion).exit_code(), 4);
        assert_eq!(CliError::from(Error::Parse { line: 1, msg: "x".into() }).exit_code(), 2);
    }
}
