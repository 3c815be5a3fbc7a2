use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned box, metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Bounds {
    /// The 10 × 9 m lab footprint with a 2.5 m ceiling.
    fn default() -> Self {
        Self {
            min: [0.0, 0.0, 0.0],
            max: [10.0, 9.0, 2.5],
        }
    }
}

impl Bounds {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryModel {
    Static {
        position: [f64; 3],
    },
    /// Gaussian steps of `step_sigma` metres per axis per step, reflected at
    /// the bounds.
    RandomWalk {
        start: [f64; 3],
        step_sigma: f64,
        #[serde(default)]
        bounds: Bounds,
    },
    /// Constant-speed linear interpolation through `points`; holds the last
    /// point afterwards.
    Waypoints {
        points: Vec<[f64; 3]>,
        speed: f64,
    },
}

impl TrajectoryModel {
    pub fn start(&self) -> Vector3<f64> {
        match self {
            TrajectoryModel::Static { position } => Vector3::from(*position),
            TrajectoryModel::RandomWalk { start, .. } => Vector3::from(*start),
            TrajectoryModel::Waypoints { points, .. } => points
                .first()
                .map(|p| Vector3::from(*p))
                .unwrap_or_default(),
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let finite = |p: &[f64; 3]| p.iter().all(|v| v.is_finite());
        match self {
            TrajectoryModel::Static { position } => {
                if !finite(position) {
                    return Err(Error::scenario(
                        format!("{field}.position"),
                        "must be finite",
                    ));
                }
            }
            TrajectoryModel::RandomWalk {
                start,
                step_sigma,
                bounds,
            } => {
                if !(step_sigma.is_finite() && *step_sigma >= 0.0) {
                    return Err(Error::scenario(
                        format!("{field}.step_sigma"),
                        "must be finite and >= 0",
                    ));
                }
                if !(finite(&bounds.min) && finite(&bounds.max))
                    || (0..3).any(|i| bounds.min[i] >= bounds.max[i])
                {
                    return Err(Error::scenario(
                        format!("{field}.bounds"),
                        "min must be below max on every axis",
                    ));
                }
                if !finite(start) || !bounds.contains(&Vector3::from(*start)) {
                    return Err(Error::scenario(
                        format!("{field}.start"),
                        "must lie inside the bounds",
                    ));
                }
            }
            TrajectoryModel::Waypoints { points, speed } => {
                if points.is_empty() || !points.iter().all(finite) {
                    return Err(Error::scenario(
                        format!("{field}.points"),
                        "need at least one finite waypoint",
                    ));
                }
                if !(speed.is_finite() && *speed > 0.0) {
                    return Err(Error::scenario(
                        format!("{field}.speed"),
                        "must be finite and > 0",
                    ));
                }
            }
        }
        Ok(())
    }
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let period = 2.0 * span;
    let y = (v - lo).rem_euclid(period);
    lo + if y > span { period - y } else { y }
}

/// Positions at steps `0..n_steps`, spaced `delta_t` seconds apart.
pub fn generate_trajectory<G: Rng + ?Sized>(
    model: &TrajectoryModel,
    n_steps: usize,
    delta_t: f64,
    rng: &mut G,
) -> Result<Vec<Vector3<f64>>> {
    model.validate("trajectory")?;
    let mut out = Vec::with_capacity(n_steps);
    match model {
        TrajectoryModel::Static { position } => {
            out.resize(n_steps, Vector3::from(*position));
        }
        TrajectoryModel::RandomWalk {
            start,
            step_sigma,
            bounds,
        } => {
            let mut p = Vector3::from(*start);
            for t in 0..n_steps {
                if t > 0 {
                    for axis in 0..3 {
                        let z: f64 = rng.sample(StandardNormal);
                        p[axis] =
                            reflect(p[axis] + step_sigma * z, bounds.min[axis], bounds.max[axis]);
                    }
                }
                out.push(p);
            }
        }
        TrajectoryModel::Waypoints { points, speed } => {
            let pts: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::from(*p)).collect();
            let mut cumulative = vec![0.0];
            for w in pts.windows(2) {
                cumulative.push(cumulative.last().unwrap() + (w[1] - w[0]).norm());
            }
            let total = *cumulative.last().unwrap();
            for t in 0..n_steps {
                let s = (speed * delta_t * t as f64).min(total);
                let seg = cumulative
                    .partition_point(|&c| c <= s)
                    .saturating_sub(1)
                    .min(pts.len() - 1);
                let p = if seg + 1 >= pts.len() {
                    pts[pts.len() - 1]
                } else {
                    let len = cumulative[seg + 1] - cumulative[seg];
                    let frac = if len > 0.0 {
                        (s - cumulative[seg]) / len
                    } else {
                        0.0
                    };
                    pts[seg] + (pts[seg + 1] - pts[seg]) * frac
                };
                out.push(p);
            }
        }
    }
    Ok(out)
}
