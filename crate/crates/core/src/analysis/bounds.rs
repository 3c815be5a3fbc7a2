use nalgebra::{Matrix3x5, Matrix5};
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::measurement_model::{MeasurementKinds, MeasurementNoise, RangingParams};
use crate::state_model::ProcessNoise;
use crate::{Error, Result};

/// Constants of the time-invariant covariance bound for one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    /// Scalar noise ceiling, `R ⪯ γ I`.
    pub gamma: f64,
    pub beta: f64,
    /// Number of measuring neighbours.
    pub n_k: usize,
}

impl BoundParams {
    pub fn new(
        noise: &MeasurementNoise,
        kinds: &MeasurementKinds,
        ranging: &RangingParams,
        n_k: usize,
    ) -> Result<Self> {
        let gamma = noise.max_eigenvalue(kinds);
        let beta = compute_beta(gamma, ranging.c, ranging.t_rsp1, ranging.gamma_bias_coeff)?;
        Ok(Self { gamma, beta, n_k })
    }

    /// `3β / N_k`, the monitored trace the bound settles at.
    pub fn trace_floor(&self) -> f64 {
        3.0 * self.beta / self.n_k as f64
    }
}

/// `β = γ / min(c², 1, (c²/4)T² + κ²)`, the smallest scalar with
/// `(1/β) I ⪯ (1/γ) diag(c², 1, 1, 1, (c²/4)T² + κ²)`.
pub fn compute_beta(gamma: f64, c: f64, t_rsp1: f64, gamma_bias_coeff: f64) -> Result<f64> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::BoundUndefined(format!(
            "gamma must be finite and > 0, got {gamma}"
        )));
    }
    let bias_entry = 0.25 * c * c * t_rsp1 * t_rsp1 + gamma_bias_coeff * gamma_bias_coeff;
    let smallest = (c * c).min(1.0).min(bias_entry);
    if !(smallest.is_finite() && smallest > 0.0) {
        return Err(Error::BoundUndefined(format!(
            "diagonal entry {smallest:e} is not positive (c = {c}, T_RSP1 = {t_rsp1}, coeff = {gamma_bias_coeff})"
        )));
    }
    Ok(gamma / smallest)
}

/// `P⁻¹ ← P⁻¹ + (N_k/β) I`, returned as the covariance `P`.
pub fn covariance_upper_bound_step(
    p_prior_inv_bound: &Matrix5<f64>,
    n_k: usize,
    beta: f64,
) -> Result<Matrix5<f64>> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::Precondition(format!(
            "beta must be finite and > 0, got {beta}"
        )));
    }
    let info = p_prior_inv_bound + Matrix5::identity() * (n_k as f64 / beta);
    linalg::spd_inverse(&info)
}

/// `M = ⌈(π_max − 3β/N_k) / tr(W Q Wᵀ)⌉`, or 1 when `π_max ≤ 3β/N_k`.
pub fn max_inter_trigger_interval(
    pi_max: f64,
    beta: f64,
    n_k: usize,
    q: &ProcessNoise,
    w: &Matrix3x5<f64>,
) -> Result<u64> {
    if n_k == 0 {
        return Err(Error::Precondition(
            "node has no measuring neighbours".into(),
        ));
    }
    let growth = (w * q.matrix() * w.transpose()).trace();
    if growth <= 0.0 {
        return Err(Error::BoundInfinite(
            "tr(W Q Wᵀ) = 0: the monitored covariance never grows".into(),
        ));
    }
    if pi_max.is_infinite() {
        return Err(Error::BoundInfinite("pi_max is infinite".into()));
    }
    let floor = 3.0 * beta / n_k as f64;
    if pi_max <= floor {
        return Ok(1);
    }
    Ok(((pi_max - floor) / growth).ceil() as u64)
}

/// Runs the bound recursion next to a filter: the same time update, and the
/// scalar-information step wherever the filter runs a measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBound {
    pub params: BoundParams,
    pub p: Matrix5<f64>,
}

impl CovarianceBound {
    pub fn new(params: BoundParams, initial: Matrix5<f64>) -> Self {
        Self { params, p: initial }
    }

    pub fn time_update(&mut self, f: &Matrix5<f64>, q: &ProcessNoise) {
        self.p = linalg::symmetrize(&(f * self.p * f.transpose() + q.matrix()));
    }

    pub fn measurement_update(&mut self) -> Result<()> {
        let inv = linalg::spd_inverse(&self.p)?;
        self.p = covariance_upper_bound_step(&inv, self.params.n_k, self.params.beta)?;
        Ok(())
    }

    /// `λ_min(P_bound − P)`.
    pub fn margin(&self, p: &Matrix5<f64>) -> f64 {
        linalg::min_eigenvalue(&(self.p - p))
    }
}
