//! Node state and first-order clock dynamics.
//!
//! The state of node `k` is `[p_x, p_y, p_z, o, b]`: position in metres,
//! clock offset in seconds and clock frequency bias (seconds per second),
//! both relative to the master clock. Position is static under the process
//! model; the offset integrates the bias over the step `delta_t`.

use nalgebra::{Matrix5, Vector3, Vector5};
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::{Error, Result};

pub const STATE_DIM: usize = 5;

/// Row/column of the clock offset in the flat state.
pub const OFFSET: usize = 3;
/// Row/column of the clock bias in the flat state.
pub const BIAS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub position: Vector3<f64>,
    pub offset: f64,
    pub bias: f64,
}

impl NodeState {
    pub fn new(position: Vector3<f64>, offset: f64, bias: f64) -> Self {
        Self {
            position,
            offset,
            bias,
        }
    }

    pub fn at(position: Vector3<f64>) -> Self {
        Self::new(position, 0.0, 0.0)
    }

    pub fn zeros() -> Self {
        Self::at(Vector3::zeros())
    }

    pub fn to_vector(&self) -> Vector5<f64> {
        Vector5::new(
            self.position.x,
            self.position.y,
            self.position.z,
            self.offset,
            self.bias,
        )
    }

    pub fn from_vector(v: &Vector5<f64>) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), v[OFFSET], v[BIAS])
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|c| c.is_finite())
            && self.offset.is_finite()
            && self.bias.is_finite()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidState(format!(
                "non-finite component in {self:?}"
            )))
        }
    }
}

impl From<Vector5<f64>> for NodeState {
    fn from(v: Vector5<f64>) -> Self {
        Self::from_vector(&v)
    }
}

impl From<NodeState> for Vector5<f64> {
    fn from(s: NodeState) -> Self {
        s.to_vector()
    }
}

/// Process noise covariance `Q` for one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessNoise(Matrix5<f64>);

impl ProcessNoise {
    pub const SYMMETRY_TOL: f64 = 1e-12;

    pub fn new(q: Matrix5<f64>) -> Result<Self> {
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::CovarianceCorrupt("Q has non-finite entries".into()));
        }
        if linalg::asymmetry(&q) > Self::SYMMETRY_TOL {
            return Err(Error::CovarianceCorrupt("Q is not symmetric".into()));
        }
        if linalg::min_eigenvalue(&q) < -Self::SYMMETRY_TOL {
            return Err(Error::CovarianceCorrupt(
                "Q is not positive semi-definite".into(),
            ));
        }
        Ok(Self(q))
    }

    pub fn diagonal(diag: [f64; STATE_DIM]) -> Result<Self> {
        Self::new(Matrix5::from_diagonal(&Vector5::from(diag)))
    }

    pub fn zero() -> Self {
        Self(Matrix5::zeros())
    }

    pub fn matrix(&self) -> &Matrix5<f64> {
        &self.0
    }

    /// The inter-trigger bound needs a nonzero `Q`; the filter itself does not.
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

fn check_step(delta_t: f64) -> Result<()> {
    if delta_t.is_finite() && delta_t >= 0.0 {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "delta_t must be finite and >= 0, got {delta_t}"
        )))
    }
}

/// `f(x) = [p, o + b·δ, b]`.
pub fn propagate(x: &NodeState, delta_t: f64) -> Result<NodeState> {
    x.ensure_finite()?;
    check_step(delta_t)?;
    Ok(NodeState::new(
        x.position,
        x.offset + x.bias * delta_t,
        x.bias,
    ))
}

/// Jacobian of [`propagate`]; the identity with `F[o, b] = δ`. The model is
/// linear so the state only enters through the finiteness check.
pub fn jacobian_f(x: &NodeState, delta_t: f64) -> Result<Matrix5<f64>> {
    x.ensure_finite()?;
    check_step(delta_t)?;
    Ok(transition_matrix(delta_t))
}

pub(crate) fn transition_matrix(delta_t: f64) -> Matrix5<f64> {
    let mut f = Matrix5::identity();
    f[(OFFSET, BIAS)] = delta_t;
    f
}

/// `ū = f(x) − F̄ x`, identically zero for the affine clock model.
pub fn affine_offset(x: &NodeState, delta_t: f64) -> Result<Vector5<f64>> {
    let fx = propagate(x, delta_t)?.to_vector();
    let jac = jacobian_f(x, delta_t)?;
    Ok(fx - jac * x.to_vector())
}
