//! Pairwise UWB observations between node `k` (receiver) and neighbour `j`.
//!
//! Each exchange yields up to three quantities:
//!
//! * `d`: counter difference, `(o_j − o_k) + ‖p_j − p_k‖ / c` (one message)
//! * `r`: single-sided two-way range, `‖p_j − p_k‖ + (c/2)(b_j − b_k)·T_RSP1`
//!   (two messages)
//! * `Γ`: double-sided two-way range, `‖p_j − p_k‖ + κ(b_j − b_k)` (three
//!   messages), where `κ` is [`RangingParams::gamma_bias_coeff`]. Any
//!   residual frequency-bias error beyond the linear term is carried by the
//!   measurement noise.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x5, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::state_model::{NodeState, BIAS, OFFSET};
use crate::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Below this separation the unit vector between two nodes is undefined.
pub const DISTANCE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    CounterDifference,
    SingleSided,
    DoubleSided,
}

impl MeasurementKind {
    pub const ALL: [MeasurementKind; 3] = [
        MeasurementKind::CounterDifference,
        MeasurementKind::SingleSided,
        MeasurementKind::DoubleSided,
    ];

    /// Row of this kind in the full `[d, r, Γ]` measurement vector.
    pub fn row(self) -> usize {
        match self {
            MeasurementKind::CounterDifference => 0,
            MeasurementKind::SingleSided => 1,
            MeasurementKind::DoubleSided => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MeasurementKind::CounterDifference => "counter_difference",
            MeasurementKind::SingleSided => "single_sided",
            MeasurementKind::DoubleSided => "double_sided",
        }
    }
}

/// Number of radio messages one observation of `kind` costs.
pub fn message_cost(kind: MeasurementKind) -> u64 {
    match kind {
        MeasurementKind::CounterDifference => 1,
        MeasurementKind::SingleSided => 2,
        MeasurementKind::DoubleSided => 3,
    }
}

/// The enabled subset of measurement kinds, kept sorted and duplicate-free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MeasurementKind>", into = "Vec<MeasurementKind>")]
pub struct MeasurementKinds(Vec<MeasurementKind>);

impl MeasurementKinds {
    pub fn new(kinds: impl IntoIterator<Item = MeasurementKind>) -> Result<Self> {
        let mut v: Vec<_> = kinds.into_iter().collect();
        v.sort();
        v.dedup();
        if v.is_empty() {
            return Err(Error::scenario(
                "measurements",
                "at least one measurement kind must be enabled",
            ));
        }
        Ok(Self(v))
    }

    pub fn all() -> Self {
        Self(MeasurementKind::ALL.to_vec())
    }

    pub fn kinds(&self) -> &[MeasurementKind] {
        &self.0
    }

    pub fn rows(&self) -> Vec<usize> {
        self.0.iter().map(|k| k.row()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Messages for one full exchange with a single neighbour.
    pub fn cost_per_neighbor(&self) -> u64 {
        self.0.iter().map(|k| message_cost(*k)).sum()
    }
}

impl Default for MeasurementKinds {
    fn default() -> Self {
        Self::all()
    }
}

impl TryFrom<Vec<MeasurementKind>> for MeasurementKinds {
    type Error = Error;
    fn try_from(v: Vec<MeasurementKind>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MeasurementKinds> for Vec<MeasurementKind> {
    fn from(k: MeasurementKinds) -> Self {
        k.0
    }
}

/// Observation `y_{kj}` sent from `from_node` (j) to `to_node` (k).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Counter difference, seconds.
    pub d: f64,
    /// Single-sided two-way range, metres.
    pub r: f64,
    /// Double-sided two-way range, metres.
    pub gamma: f64,
    pub from_node: usize,
    pub to_node: usize,
    pub step: usize,
}

impl Measurement {
    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.d, self.r, self.gamma)
    }

    pub fn select(&self, kinds: &MeasurementKinds) -> DVector<f64> {
        let v = self.vector();
        DVector::from_iterator(kinds.len(), kinds.rows().into_iter().map(|r| v[r]))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d.is_finite() && self.r.is_finite() && self.gamma.is_finite()) {
            return Err(Error::InvalidState(format!(
                "non-finite measurement {self:?}"
            )));
        }
        if self.from_node == self.to_node {
            return Err(Error::Topology(format!(
                "measurement from node {} to itself",
                self.from_node
            )));
        }
        Ok(())
    }
}

/// Measurement noise covariance `R` over `[d, r, Γ]` (s², m², m²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementNoise(Matrix3<f64>);

impl MeasurementNoise {
    pub fn new(r: Matrix3<f64>) -> Result<Self> {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::CovarianceCorrupt("R has non-finite entries".into()));
        }
        let scale = r.diagonal().amax().max(f64::MIN_POSITIVE);
        if linalg::asymmetry(&r) > 1e-12 * scale {
            return Err(Error::CovarianceCorrupt("R is not symmetric".into()));
        }
        if r.diagonal().iter().any(|d| *d <= 0.0) || r.cholesky().is_none() {
            return Err(Error::CovarianceCorrupt(
                "R is not positive definite".into(),
            ));
        }
        Ok(Self(r))
    }

    /// Diagonal `R` from per-row standard deviations.
    pub fn from_std(sigma_d: f64, sigma_r: f64, sigma_gamma: f64) -> Result<Self> {
        Self::new(Matrix3::from_diagonal(&Vector3::new(
            sigma_d * sigma_d,
            sigma_r * sigma_r,
            sigma_gamma * sigma_gamma,
        )))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// `R` restricted to the enabled rows.
    pub fn select(&self, kinds: &MeasurementKinds) -> DMatrix<f64> {
        let rows = kinds.rows();
        DMatrix::from_fn(rows.len(), rows.len(), |i, j| self.0[(rows[i], rows[j])])
    }

    /// Largest eigenvalue of `R` restricted to `kinds`.
    pub fn max_eigenvalue(&self, kinds: &MeasurementKinds) -> f64 {
        linalg::max_eigenvalue(&self.select(kinds))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangingParams {
    /// Response duration of the single-sided exchange, seconds.
    pub t_rsp1: f64,
    /// Propagation speed, m/s.
    #[serde(default = "default_c")]
    pub c: f64,
    /// Sensitivity of the double-sided range to the bias difference, metres
    /// per unit bias.
    #[serde(default)]
    pub gamma_bias_coeff: f64,
}

fn default_c() -> f64 {
    SPEED_OF_LIGHT
}

impl Default for RangingParams {
    fn default() -> Self {
        Self {
            t_rsp1: 1e-3,
            c: SPEED_OF_LIGHT,
            gamma_bias_coeff: 0.0,
        }
    }
}

impl RangingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_rsp1.is_finite() && self.t_rsp1 > 0.0) {
            return Err(Error::scenario("ranging.t_rsp1", "must be finite and > 0"));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::scenario("ranging.c", "must be finite and > 0"));
        }
        if !self.gamma_bias_coeff.is_finite() {
            return Err(Error::scenario(
                "ranging.gamma_bias_coeff",
                "must be finite",
            ));
        }
        Ok(())
    }

    /// `∂r/∂b_j = (c/2)·T_RSP1`.
    pub fn single_sided_bias_gain(&self) -> f64 {
        0.5 * self.c * self.t_rsp1
    }
}

/// `h_j(x_k)`: the noiseless `[d, r, Γ]` that `k` receives from `j`.
pub fn h(x_k: &NodeState, x_j: &NodeState, params: &RangingParams) -> Vector3<f64> {
    let dist = (x_j.position - x_k.position).norm();
    let db = x_j.bias - x_k.bias;
    Vector3::new(
        (x_j.offset - x_k.offset) + dist / params.c,
        dist + params.single_sided_bias_gain() * db,
        dist + params.gamma_bias_coeff * db,
    )
}

/// `∂h/∂x_k`, the 3×5 Jacobian with respect to the receiver's own state.
pub fn jacobian_h(
    x_k: &NodeState,
    x_j: &NodeState,
    params: &RangingParams,
) -> Result<Matrix3x5<f64>> {
    let diff = x_j.position - x_k.position;
    let dist = diff.norm();
    if dist.is_nan() || dist < DISTANCE_EPSILON {
        return Err(Error::DegenerateGeometry(format!(
            "nodes are {dist:e} m apart, below {DISTANCE_EPSILON:e} m"
        )));
    }
    let u = diff / dist;
    let mut jac = Matrix3x5::zeros();
    for axis in 0..3 {
        jac[(0, axis)] = -u[axis] / params.c;
        jac[(1, axis)] = -u[axis];
        jac[(2, axis)] = -u[axis];
    }
    jac[(0, OFFSET)] = -1.0;
    jac[(1, BIAS)] = -params.single_sided_bias_gain();
    jac[(2, BIAS)] = -params.gamma_bias_coeff;
    Ok(jac)
}

/// Draw `y = h(truth) + v`, `v ~ N(0, R)`.
pub fn simulate_measurement<G: Rng + ?Sized>(
    truth_k: &NodeState,
    truth_j: &NodeState,
    params: &RangingParams,
    noise: &MeasurementNoise,
    rng: &mut G,
) -> Vector3<f64> {
    // R was checked positive definite on construction.
    let chol = noise.0.cholesky().expect("R is positive definite");
    let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    h(truth_k, truth_j, params) + chol.l() * z
}

/// [`simulate_measurement`] packaged with its edge and step metadata.
#[allow(clippy::too_many_arguments)]
pub fn synthesize<G: Rng + ?Sized>(
    to_node: usize,
    from_node: usize,
    step: usize,
    truth_k: &NodeState,
    truth_j: &NodeState,
    params: &RangingParams,
    noise: &MeasurementNoise,
    rng: &mut G,
) -> Measurement {
    let y = simulate_measurement(truth_k, truth_j, params, noise, rng);
    Measurement {
        d: y[0],
        r: y[1],
        gamma: y[2],
        from_node,
        to_node,
        step,
    }
}
