//! Offline analysis: covariance bounds, the global error covariance, Monte
//! Carlo estimates, run metrics and the verification suite.

pub mod bounds;
pub mod diagnostics;
pub mod global;
pub mod linear_model;
pub mod metrics;
pub mod monte_carlo;

pub use bounds::{
    compute_beta, covariance_upper_bound_step, max_inter_trigger_interval, BoundParams,
    CovarianceBound,
};
pub use diagnostics::{
    jacobian_fd_check, verify, Diagnostic, DiagnosticObserver, DiagnosticTally, JacobianCheck,
    Status,
};
pub use global::{
    global_sigma_diffusion_update, global_sigma_measurement_update, global_sigma_time_update,
    GlobalCovariance,
};
pub use linear_model::LinearDiffusionModel;
pub use metrics::{aggregate, spearman, summarize, RunMetrics, RunSummary, SweepRow};
pub use monte_carlo::{
    compare_linear_model, monte_carlo_covariance, monte_carlo_scenario_covariance,
    OracleComparison, MIN_RUNS,
};
