use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("record too short: need {needed} samples, have {available}")]
    RecordTooShort { needed: usize, available: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("instruments annihilated by projection")]
    InstrumentsAnnihilated,

    #[error("singular value decomposition failed to converge")]
    SvdFailed,

    #[error("dual certificate infeasible (least-squares residual {residual:e})")]
    DualCertificateInfeasible { residual: f64 },

    #[error("no significant gap in singular value spectrum")]
    NoSignificantGap,

    #[error("solver did not converge after {iterations} iterations (primal {primal:e}, dual {dual:e})")]
    NotConverged {
        iterations: usize,
        primal: f64,
        dual: f64,
    },

    #[error("empty tuning region")]
    EmptyTuningRegion,

    #[error("unconverged cells in slice: {0:?}")]
    UnconvergedSlice(Vec<(usize, usize)>),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
