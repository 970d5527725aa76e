//! Outlier-robust subspace identification of linear state-space models.
//!
//! The measured outputs are filtered through a convex program that trades off
//! the nuclear norm of a weighted, projected output Hankel matrix against a
//! Huber-type fit (a quadratic fit plus a sparse outlier vector). The filtered
//! outputs are then realized as a state-space model with the PO-MOESP weights.
//!
//! Module map:
//!
//! - [`hankel`]: block-Hankel matrices, projections, instruments and the
//!   weighted operator `G(y) = Hankel(y) * B_map` with its adjoint.
//! - [`solver`]: the robust filtering problem and its splitting solver.
//! - [`bounds`]: shutoff values of both penalties.
//! - [`realization`]: order selection and the `(A, B, C, D, x0)` estimates.
//! - [`tuning`]: grid surveys, knee selection and cross-validation.
//! - [`harness`]: data loading, outlier and noise injection, detection
//!   metrics and Monte Carlo experiments.
//!
//! Time series are stored as `DMatrix<f64>` with one row per channel and one
//! column per sample.

pub mod bounds;
pub mod error;
pub mod hankel;
pub mod harness;
pub mod linalg;
pub mod realization;
pub mod solver;
pub mod tuning;

pub use bounds::{
    dual_certificate, huber_gradient_at_zero, lambda_nuc_max, lambda_sparse_max, penalty_bounds,
    penalty_bounds_for_record, shutoff_point, CertificateOptions, DualCertificate, PenaltyBounds,
};
pub use error::{Error, Result};
pub use hankel::{
    adjoint_g, apply_g, build_block_hankel, build_g_operator, build_instruments, build_weight_w2,
    nullspace_projector, GOperator, HankelParams, IoRecord,
};
pub use harness::{
    add_noise, detection_report, inject_outliers, load_record, monte_carlo, DetectionReport,
    Injection, MonteCarloConfig, MonteCarloSummary, OutlierPlan, RecordFormat, SyntheticBenchmark,
};
pub use realization::{
    estimate_ac, estimate_bd_x0, estimate_g_hat, identify, select_order, simulate, Identified,
    IdentifyOptions, OrderPolicy, StateSpaceModel, SvdSplit,
};
pub use solver::{
    eliminate_e, huber_value, objective_value, singular_value_threshold, soft_threshold,
    solve_robust, Penalties, RobustProblem, SolveOptions, SolveResult,
};
pub use tuning::{
    cross_validate, grid_search, knee_point, residual_training_error, select_by_knee, GridSpec,
    KneeAxis, Selection, SelectionMethod, Spacing, TuningPlan, TuningSurface,
};

pub use nalgebra::{DMatrix, DVector};
