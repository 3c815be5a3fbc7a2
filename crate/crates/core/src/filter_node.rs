//! One node of the event-triggered diffusion EKF.
//!
//! Every step runs the time update. When the trigger fires the node also
//! runs the information-form measurement update, shares its intermediate
//! estimate `ψ`, and replaces its estimate by a convex combination of the
//! `ψ`s it received. The covariance `P` is never touched by the combination.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DVector, Matrix3x5, Matrix5, Vector5};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, DynRows5};
use crate::measurement_model::{
    self, Measurement, MeasurementKinds, MeasurementNoise, RangingParams,
};
use crate::state_model::{self, NodeState, ProcessNoise};
use crate::{Error, Result};

/// Tolerance for the symmetric/PSD checks on `P`.
pub const COVARIANCE_TOL: f64 = 1e-9;
/// Tolerance on the sum of a row of diffusion weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub node_id: usize,
    pub x_hat: NodeState,
    pub p: Matrix5<f64>,
    weights: BTreeMap<usize, f64>,
}

impl FilterState {
    /// `weights` is this node's row of the diffusion matrix; its support is
    /// the neighbourhood and must include the node itself.
    pub fn new(
        node_id: usize,
        x_hat: NodeState,
        p: Matrix5<f64>,
        weights: BTreeMap<usize, f64>,
    ) -> Result<Self> {
        x_hat.ensure_finite()?;
        check_covariance(&p)?;
        validate_weights(node_id, &weights)?;
        Ok(Self {
            node_id,
            x_hat,
            p: linalg::symmetrize(&p),
            weights,
        })
    }

    /// A node with no neighbours and self-weight one.
    pub fn isolated(node_id: usize, x_hat: NodeState, p: Matrix5<f64>) -> Result<Self> {
        Self::new(node_id, x_hat, p, BTreeMap::from([(node_id, 1.0)]))
    }

    pub fn neighborhood(&self) -> BTreeSet<usize> {
        self.weights.keys().copied().collect()
    }

    pub fn diffusion_weights(&self) -> &BTreeMap<usize, f64> {
        &self.weights
    }

    pub fn monitored_trace(&self, policy: &TriggerPolicy) -> f64 {
        policy.monitored_trace(&self.p)
    }
}

fn validate_weights(node_id: usize, weights: &BTreeMap<usize, f64>) -> Result<()> {
    if !weights.contains_key(&node_id) {
        return Err(Error::Topology(format!(
            "node {node_id} missing from its own neighbourhood"
        )));
    }
    if weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Topology(format!(
            "node {node_id} has a negative or non-finite weight"
        )));
    }
    let sum: f64 = weights.values().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Topology(format!(
            "weights of node {node_id} sum to {sum}"
        )));
    }
    Ok(())
}

fn check_covariance(p: &Matrix5<f64>) -> Result<()> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::CovarianceCorrupt("non-finite entry".into()));
    }
    if linalg::asymmetry(p) > COVARIANCE_TOL {
        return Err(Error::CovarianceCorrupt(format!(
            "asymmetry {:e}",
            linalg::asymmetry(p)
        )));
    }
    // λ_min(P) ≥ −tol  ⇔  P + tol·I ⪰ 0.
    if (p + Matrix5::identity() * COVARIANCE_TOL)
        .cholesky()
        .is_none()
    {
        return Err(Error::CovarianceCorrupt(format!(
            "minimum eigenvalue {:e}",
            linalg::min_eigenvalue(p)
        )));
    }
    Ok(())
}

/// Selection matrix and threshold of the trigger `tr(W P Wᵀ) > π_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerPolicy {
    w: Matrix3x5<f64>,
    pi_max: f64,
}

impl TriggerPolicy {
    pub fn new(w: Matrix3x5<f64>, pi_max: f64) -> Result<Self> {
        if pi_max.is_nan() || pi_max < 0.0 {
            return Err(Error::Precondition(format!(
                "pi_max must be >= 0, got {pi_max}"
            )));
        }
        if w.iter().any(|v| !v.is_finite()) || w.rank(1e-12) < 3 {
            return Err(Error::Precondition("W must have full row rank".into()));
        }
        Ok(Self { w, pi_max })
    }

    /// `W` selecting the position block.
    pub fn position_selector() -> Matrix3x5<f64> {
        let mut w = Matrix3x5::zeros();
        for i in 0..3 {
            w[(i, i)] = 1.0;
        }
        w
    }

    /// Monitor the position block with threshold `pi_max` (m²).
    pub fn position(pi_max: f64) -> Result<Self> {
        Self::new(Self::position_selector(), pi_max)
    }

    pub fn w(&self) -> &Matrix3x5<f64> {
        &self.w
    }

    pub fn pi_max(&self) -> f64 {
        self.pi_max
    }

    pub fn monitored_trace(&self, p: &Matrix5<f64>) -> f64 {
        (self.w * p * self.w.transpose()).trace()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntermediateEstimate {
    pub psi: Vector5<f64>,
    pub node_id: usize,
    pub step: usize,
}

/// One linearised observation: `Ĥ`, `y − h(x̂)` and its noise covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedObservation {
    pub jacobian: DynRows5,
    pub innovation: DVector<f64>,
    pub noise: nalgebra::DMatrix<f64>,
}

impl LinearizedObservation {
    pub fn new(
        jacobian: DynRows5,
        innovation: DVector<f64>,
        noise: nalgebra::DMatrix<f64>,
    ) -> Result<Self> {
        let m = jacobian.nrows();
        if innovation.len() != m || noise.shape() != (m, m) {
            return Err(Error::Dimension(format!(
                "observation with {m} rows has innovation {} and noise {:?}",
                innovation.len(),
                noise.shape()
            )));
        }
        Ok(Self {
            jacobian,
            innovation,
            noise,
        })
    }

    /// `Ĥᵀ R⁻¹ Ĥ`.
    pub fn information(&self) -> Result<Matrix5<f64>> {
        let rinv_h = linalg::spd_solve(&self.noise, &self.jacobian)?;
        Ok(self.jacobian.transpose() * rinv_h)
    }
}

/// A received measurement together with the receiver's current copy of the
/// sender's state, at which `h` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborMeasurement {
    pub measurement: Measurement,
    pub neighbor_estimate: NodeState,
}

/// Per-node model constants consumed by [`step`].
#[derive(Debug, Clone, PartialEq)]
pub struct NodeModel {
    pub q: ProcessNoise,
    pub noise: MeasurementNoise,
    pub ranging: RangingParams,
    pub kinds: MeasurementKinds,
}

/// Step 1: `x̂ ← F̄x̂ + ū`, `P ← F̄ P F̄ᵀ + Q`.
pub fn time_update(fs: &FilterState, delta_t: f64, q: &ProcessNoise) -> Result<FilterState> {
    check_covariance(&fs.p)?;
    let f = state_model::jacobian_f(&fs.x_hat, delta_t)?;
    let u = state_model::affine_offset(&fs.x_hat, delta_t)?;
    let x = f * fs.x_hat.to_vector() + u;
    let p = linalg::symmetrize(&(f * fs.p * f.transpose() + q.matrix()));
    Ok(FilterState {
        x_hat: NodeState::from_vector(&x),
        p,
        ..fs.clone()
    })
}

/// `tr(W P Wᵀ) > π_max`, strictly.
pub fn trigger_check(p: &Matrix5<f64>, policy: &TriggerPolicy) -> bool {
    policy.monitored_trace(p) > policy.pi_max()
}

/// Linearise received measurements around the node's prior estimate.
pub fn linearize(
    fs: &FilterState,
    measurements: &[NeighborMeasurement],
    noise: &MeasurementNoise,
    ranging: &RangingParams,
    kinds: &MeasurementKinds,
) -> Result<Vec<LinearizedObservation>> {
    let rows = kinds.rows();
    let r = noise.select(kinds);
    measurements
        .iter()
        .map(|nm| {
            let m = &nm.measurement;
            m.validate()?;
            if m.to_node != fs.node_id {
                return Err(Error::Topology(format!(
                    "measurement addressed to node {} given to node {}",
                    m.to_node, fs.node_id
                )));
            }
            let full_jac = measurement_model::jacobian_h(&fs.x_hat, &nm.neighbor_estimate, ranging)
                .map_err(|e| {
                    Error::DegenerateGeometry(format!("edge {} -> {}: {e}", m.from_node, m.to_node))
                })?;
            let predicted = measurement_model::h(&fs.x_hat, &nm.neighbor_estimate, ranging);
            let y = m.vector();
            let jac = DynRows5::from_fn(rows.len(), |i, j| full_jac[(rows[i], j)]);
            let innovation =
                DVector::from_iterator(rows.len(), rows.iter().map(|&row| y[row] - predicted[row]));
            LinearizedObservation::new(jac, innovation, r.clone())
        })
        .collect()
}

/// Information-form update over already linearised observations:
/// `P⁻¹ ← P⁻¹ + Σ Ĥᵀ R⁻¹ Ĥ`, `ψ = x̂ + P Σ Ĥᵀ R⁻¹ (y − h(x̂))`.
pub fn information_update(
    fs: &FilterState,
    observations: &[LinearizedObservation],
    step: usize,
) -> Result<(IntermediateEstimate, FilterState)> {
    if observations.is_empty() {
        return Err(Error::Precondition(format!(
            "node {} has no measurements to update with",
            fs.node_id
        )));
    }
    check_covariance(&fs.p)?;
    let mut info = linalg::spd_inverse(&fs.p).map_err(|e| {
        Error::NumericalFailure(format!("prior covariance of node {}: {e}", fs.node_id))
    })?;
    let mut score = Vector5::zeros();
    for obs in observations {
        let rinv_h = linalg::spd_solve(&obs.noise, &obs.jacobian)?;
        info += obs.jacobian.transpose() * &rinv_h;
        // Ĥᵀ R⁻¹ ν = (R⁻¹ Ĥ)ᵀ ν since R is symmetric.
        score += rinv_h.transpose() * &obs.innovation;
    }
    let info = linalg::symmetrize(&info);
    let p = linalg::spd_inverse(&info).map_err(|e| {
        Error::NumericalFailure(format!("information matrix of node {}: {e}", fs.node_id))
    })?;
    let psi = fs.x_hat.to_vector() + p * score;
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure(format!(
            "non-finite update at node {}",
            fs.node_id
        )));
    }
    let next = FilterState {
        x_hat: NodeState::from_vector(&psi),
        p,
        ..fs.clone()
    };
    Ok((
        IntermediateEstimate {
            psi,
            node_id: fs.node_id,
            step,
        },
        next,
    ))
}

/// Step 2 on raw measurements.
pub fn measurement_update(
    fs: &FilterState,
    measurements: &[NeighborMeasurement],
    noise: &MeasurementNoise,
    ranging: &RangingParams,
    kinds: &MeasurementKinds,
    step: usize,
) -> Result<(IntermediateEstimate, FilterState)> {
    if measurements.is_empty() {
        return Err(Error::Precondition(format!(
            "node {} has no measurements to update with",
            fs.node_id
        )));
    }
    let obs = linearize(fs, measurements, noise, ranging, kinds)?;
    information_update(fs, &obs, step)
}

/// Step 3: `x̂ = Σ_j C_{kj} ψ_j`. The keys of `psis` and `weights` must match.
pub fn diffusion_update(
    psis: &BTreeMap<usize, IntermediateEstimate>,
    weights: &BTreeMap<usize, f64>,
) -> Result<NodeState> {
    if psis.len() != weights.len() || psis.keys().zip(weights.keys()).any(|(a, b)| a != b) {
        return Err(Error::Topology(format!(
            "diffusion weights cover {:?} but estimates came from {:?}",
            weights.keys().collect::<Vec<_>>(),
            psis.keys().collect::<Vec<_>>()
        )));
    }
    if weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Topology(
            "diffusion weights must be non-negative".into(),
        ));
    }
    let sum: f64 = weights.values().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Topology(format!("diffusion weights sum to {sum}")));
    }
    let combined = psis.iter().fold(Vector5::zeros(), |acc, (id, est)| {
        acc + est.psi * weights[id]
    });
    let x = NodeState::from_vector(&combined);
    x.ensure_finite()?;
    Ok(x)
}

/// One full step of a node run on its own: time update, then (when
/// `triggered`) measurement update and combination of its `ψ` with
/// `psis_from_neighbors`. Returns the `ψ` the node shares when triggered.
pub fn step(
    fs: &FilterState,
    delta_t: f64,
    model: &NodeModel,
    triggered: bool,
    measurements: &[NeighborMeasurement],
    psis_from_neighbors: &BTreeMap<usize, IntermediateEstimate>,
    step_index: usize,
) -> Result<(FilterState, Option<IntermediateEstimate>)> {
    let prior = time_update(fs, delta_t, &model.q)?;
    if !triggered {
        return Ok((prior, None));
    }
    let (psi, mut updated) = measurement_update(
        &prior,
        measurements,
        &model.noise,
        &model.ranging,
        &model.kinds,
        step_index,
    )?;
    let mut psis = psis_from_neighbors.clone();
    psis.insert(fs.node_id, psi);
    updated.x_hat = diffusion_update(&psis, &fs.weights)?;
    Ok((updated, Some(psi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, Vector3};

    fn identity_obs(innovation: Vector5<f64>) -> LinearizedObservation {
        LinearizedObservation::new(
            DynRows5::identity(5),
            DVector::from_column_slice(innovation.as_slice()),
            DMatrix::identity(5, 5),
        )
        .unwrap()
    }

    fn node(p: Matrix5<f64>) -> FilterState {
        FilterState::isolated(
            0,
            NodeState::new(Vector3::new(1.0, 2.0, 3.0), 1e-6, 2e-6),
            p,
        )
        .unwrap()
    }

    #[test]
    fn zero_step_zero_noise_is_identity() {
        let fs = node(Matrix5::identity());
        let next = time_update(&fs, 0.0, &ProcessNoise::zero()).unwrap();
        assert_eq!(next, fs);
    }

    #[test]
    fn unit_prior_plus_unit_noise_doubles() {
        let fs = node(Matrix5::identity());
        let q = ProcessNoise::new(Matrix5::identity()).unwrap();
        let next = time_update(&fs, 0.0, &q).unwrap();
        assert_eq!(next.p, Matrix5::identity() * 2.0);
    }

    #[test]
    fn corrupt_prior_rejected() {
        let mut p = Matrix5::identity();
        p[(0, 0)] = -1.0;
        let fs = FilterState {
            p,
            ..node(Matrix5::identity())
        };
        let q = ProcessNoise::new(Matrix5::identity()).unwrap();
        assert!(matches!(
            time_update(&fs, 0.1, &q),
            Err(Error::CovarianceCorrupt(_))
        ));
    }

    #[test]
    fn trigger_examples() {
        let p = Matrix5::identity();
        assert!(!trigger_check(&p, &TriggerPolicy::position(4.0).unwrap()));
        assert!(trigger_check(&p, &TriggerPolicy::position(2.0).unwrap()));
        assert!(!trigger_check(&p, &TriggerPolicy::position(3.0).unwrap()));
        let mut tiny = Matrix5::zeros();
        tiny[(2, 2)] = 1e-30;
        assert!(trigger_check(&tiny, &TriggerPolicy::position(0.0).unwrap()));
        assert!(!trigger_check(
            &(p * 1e12),
            &TriggerPolicy::position(f64::INFINITY).unwrap()
        ));
    }

    #[test]
    fn policy_validation() {
        assert!(TriggerPolicy::position(-1.0).is_err());
        assert!(TriggerPolicy::position(f64::NAN).is_err());
        let mut w = TriggerPolicy::position_selector();
        w[(2, 2)] = 0.0;
        assert!(TriggerPolicy::new(w, 1.0).is_err());
    }

    #[test]
    fn identity_observation_halves_covariance() {
        let fs = node(Matrix5::identity());
        let nu = Vector5::new(1.0, -2.0, 0.5, 4.0, -1.0);
        let (psi, next) = information_update(&fs, &[identity_obs(nu)], 3).unwrap();
        assert!((next.p - Matrix5::identity() * 0.5).amax() < 1e-15);
        assert!((psi.psi - (fs.x_hat.to_vector() + nu * 0.5)).amax() < 1e-15);
        assert_eq!(psi.step, 3);
        assert_eq!(psi.node_id, 0);
    }

    #[test]
    fn zero_innovation_keeps_estimate_but_shrinks_covariance() {
        let fs = node(Matrix5::identity() * 4.0);
        let (psi, next) = information_update(&fs, &[identity_obs(Vector5::zeros())], 0).unwrap();
        assert_eq!(psi.psi, fs.x_hat.to_vector());
        assert!(linalg::max_eigenvalue(&(next.p - fs.p)) < 0.0);
    }

    #[test]
    fn empty_measurements_rejected() {
        let fs = node(Matrix5::identity());
        assert!(matches!(
            information_update(&fs, &[], 0),
            Err(Error::Precondition(_))
        ));
        let model = NodeModel {
            q: ProcessNoise::new(Matrix5::identity()).unwrap(),
            noise: MeasurementNoise::from_std(1e-9, 0.3, 0.1).unwrap(),
            ranging: RangingParams::default(),
            kinds: MeasurementKinds::all(),
        };
        assert!(matches!(
            measurement_update(&fs, &[], &model.noise, &model.ranging, &model.kinds, 0),
            Err(Error::Precondition(_))
        ));
    }

    fn est(id: usize, v: [f64; 5]) -> IntermediateEstimate {
        IntermediateEstimate {
            psi: Vector5::from(v),
            node_id: id,
            step: 0,
        }
    }

    #[test]
    fn combination_of_equal_points() {
        let v = [1.0, 2.0, 3.0, 4e-6, 5e-7];
        let psis = BTreeMap::from([(0, est(0, v)), (1, est(1, v)), (2, est(2, v))]);
        let w = BTreeMap::from([(0, 0.5), (1, 0.25), (2, 0.25)]);
        let x = diffusion_update(&psis, &w).unwrap();
        assert!((x.to_vector() - Vector5::from(v)).amax() < 1e-15);
    }

    #[test]
    fn self_weight_one_returns_own_psi() {
        let psis = BTreeMap::from([
            (0, est(0, [1.0, 0.0, 0.0, 0.0, 0.0])),
            (1, est(1, [9.0; 5])),
        ]);
        let w = BTreeMap::from([(0, 1.0), (1, 0.0)]);
        let x = diffusion_update(&psis, &w).unwrap();
        assert_eq!(x.to_vector(), Vector5::new(1.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn midpoint_of_two() {
        let psis = BTreeMap::from([
            (0, est(0, [0.0, 0.0, 0.0, 0.0, 0.0])),
            (4, est(4, [2.0, 4.0, -6.0, 2.0, 8.0])),
        ]);
        let w = BTreeMap::from([(0, 0.5), (4, 0.5)]);
        let x = diffusion_update(&psis, &w).unwrap();
        assert_eq!(x.to_vector(), Vector5::new(1.0, 2.0, -3.0, 1.0, 4.0));
    }

    #[test]
    fn key_mismatch_is_topology_error() {
        let psis = BTreeMap::from([(0, est(0, [0.0; 5])), (2, est(2, [0.0; 5]))]);
        let w = BTreeMap::from([(0, 0.5), (1, 0.5)]);
        assert!(matches!(
            diffusion_update(&psis, &w),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn weights_validated_on_construction() {
        let x = NodeState::zeros();
        let p = Matrix5::identity();
        assert!(FilterState::new(0, x, p, BTreeMap::from([(1, 1.0)])).is_err());
        assert!(FilterState::new(0, x, p, BTreeMap::from([(0, 0.7), (1, 0.2)])).is_err());
        assert!(FilterState::new(0, x, p, BTreeMap::from([(0, 1.2), (1, -0.2)])).is_err());
        let ok = FilterState::new(0, x, p, BTreeMap::from([(0, 0.6), (1, 0.4)])).unwrap();
        assert_eq!(ok.neighborhood(), BTreeSet::from([0, 1]));
    }

    #[test]
    fn untriggered_step_is_time_update() {
        let fs = node(Matrix5::identity());
        let model = NodeModel {
            q: ProcessNoise::new(Matrix5::identity() * 0.1).unwrap(),
            noise: MeasurementNoise::from_std(1e-9, 0.3, 0.1).unwrap(),
            ranging: RangingParams::default(),
            kinds: MeasurementKinds::all(),
        };
        let (next, psi) = step(&fs, 0.1, &model, false, &[], &BTreeMap::new(), 0).unwrap();
        assert!(psi.is_none());
        assert_eq!(next, time_update(&fs, 0.1, &model.q).unwrap());
    }
}
