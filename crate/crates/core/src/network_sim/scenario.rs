//! Scenario configuration: the JSON schema, defaults and validation.
//!
//! Node ids are assigned anchors first, in file order, then the mobile node.
//! The default noise levels are simulator calibration constants chosen for a
//! UWB-like setup, not measured values.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Matrix5, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::topology::TopologySpec;
use super::trajectory::{Bounds, TrajectoryModel};
use crate::filter_node::TriggerPolicy;
use crate::measurement_model::{MeasurementKinds, MeasurementNoise, RangingParams};
use crate::state_model::{ProcessNoise, BIAS, OFFSET};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Trigger threshold; serialises `∞` as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Threshold(pub f64);

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Threshold(v)),
            Raw::Text(s) => s.parse::<Threshold>().map_err(serde::de::Error::custom),
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "+inf" => Ok(Threshold(f64::INFINITY)),
            other => other
                .parse::<f64>()
                .map(Threshold)
                .map_err(|_| format!("expected a number or \"inf\", got {s:?}")),
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == f64::INFINITY {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// A 5×5 covariance given either by its diagonal or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Cov5 {
    Diagonal { diag: [f64; 5] },
    Full { matrix: [[f64; 5]; 5] },
}

impl Cov5 {
    pub fn to_matrix(&self) -> Matrix5<f64> {
        match self {
            Cov5::Diagonal { diag } => Matrix5::from_diagonal(&(*diag).into()),
            Cov5::Full { matrix } => Matrix5::from_fn(|i, j| matrix[i][j]),
        }
    }
}

/// A 3×3 covariance over `[d, r, Γ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Cov3 {
    Diagonal { diag: [f64; 3] },
    Full { matrix: [[f64; 3]; 3] },
}

impl Cov3 {
    pub fn to_matrix(&self) -> Matrix3<f64> {
        match self {
            Cov3::Diagonal { diag } => Matrix3::from_diagonal(&Vector3::from(*diag)),
            Cov3::Full { matrix } => Matrix3::from_fn(|i, j| matrix[i][j]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobileSpec {
    pub trajectory: TrajectoryModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClockSpec {
    /// Node whose clock defines time; its offset and bias are zero.
    pub master: Option<usize>,
    /// Spread of the true initial offsets, seconds. Also the prior std.
    pub offset_sigma: f64,
    /// Spread of the true initial biases. Also the prior std.
    pub bias_sigma: f64,
    /// Prior std of the master clock's offset and bias.
    pub master_sigma: f64,
}

impl Default for ClockSpec {
    fn default() -> Self {
        Self {
            master: Some(0),
            offset_sigma: 1e-9,
            bias_sigma: 1e-9,
            master_sigma: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    pub anchor_position_sigma: f64,
    pub mobile_position_sigma: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            anchor_position_sigma: 0.05,
            mobile_position_sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub anchor_q: Cov5,
    pub mobile_q: Cov5,
    pub r: Cov3,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            anchor_q: Cov5::Diagonal {
                diag: [0.0, 0.0, 0.0, 1e-22, 1e-22],
            },
            mobile_q: Cov5::Diagonal {
                diag: [0.01, 0.01, 0.01, 1e-22, 1e-22],
            },
            r: Cov3::Diagonal {
                diag: [1e-18, 0.09, 0.01],
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    /// One leader tests its own covariance and fires for everyone.
    #[default]
    Leader,
    /// Every node tests its own covariance and only fires for itself.
    Autonomous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotificationCost {
    /// The leader sends `n − 1` messages per trigger.
    #[default]
    Unicast,
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerSpec {
    pub pi_max: Threshold,
    pub mode: TriggerMode,
    /// Defaults to the mobile node, or node 0 without one.
    pub leader: Option<usize>,
    pub notification: NotificationCost,
}

impl Default for TriggerSpec {
    fn default() -> Self {
        Self {
            pi_max: Threshold(1.0),
            mode: TriggerMode::Leader,
            leader: None,
            notification: NotificationCost::Unicast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub n_steps: usize,
    pub delta_t: f64,
    pub anchors: Vec<[f64; 3]>,
    #[serde(default)]
    pub mobile: Option<MobileSpec>,
    #[serde(default)]
    pub clocks: ClockSpec,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub ranging: RangingParams,
    #[serde(default)]
    pub trigger: TriggerSpec,
    #[serde(default)]
    pub topology: TopologySpec,
    #[serde(default)]
    pub measurements: MeasurementKinds,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

impl Default for Scenario {
    /// Eight anchors around a 10 × 9 m room, six on the ceiling and two at
    /// waist height, plus one mobile node on a random walk.
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "default".into(),
            seed: 1,
            n_steps: 3000,
            delta_t: 0.1,
            anchors: vec![
                [0.5, 0.5, 2.5],
                [5.0, 0.5, 2.5],
                [9.5, 0.5, 2.5],
                [0.5, 8.5, 2.5],
                [5.0, 8.5, 2.5],
                [9.5, 8.5, 2.5],
                [0.5, 4.5, 1.0],
                [9.5, 4.5, 1.0],
            ],
            mobile: Some(MobileSpec {
                trajectory: TrajectoryModel::RandomWalk {
                    start: [5.0, 4.5, 1.25],
                    step_sigma: 0.1,
                    bounds: Bounds::default(),
                },
            }),
            clocks: ClockSpec::default(),
            prior: PriorSpec::default(),
            noise: NoiseSpec::default(),
            ranging: RangingParams::default(),
            trigger: TriggerSpec::default(),
            topology: TopologySpec::FullyConnected,
            measurements: MeasurementKinds::all(),
        }
    }
}

fn check_sigma(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::scenario(field, "must be finite and >= 0"))
    }
}

impl Scenario {
    /// Parse JSON text, apply `key.path=value` overrides, and validate.
    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::scenario("<document>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn from_path(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text, overrides)
    }

    /// The built-in default with overrides applied.
    pub fn default_with(overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Scenario::default())?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self> {
        let scenario: Scenario = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::scenario(
                if path == "." {
                    "<document>".to_string()
                } else {
                    path
                },
                e.into_inner().to_string(),
            )
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON encoding, hex.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.anchors.len() + usize::from(self.mobile.is_some())
    }

    pub fn mobile_id(&self) -> Option<usize> {
        self.mobile.as_ref().map(|_| self.anchors.len())
    }

    pub fn pi_max(&self) -> f64 {
        self.trigger.pi_max.0
    }

    pub fn trigger_policy(&self) -> Result<TriggerPolicy> {
        TriggerPolicy::position(self.pi_max())
    }

    pub fn measurement_noise(&self) -> Result<MeasurementNoise> {
        MeasurementNoise::new(self.noise.r.to_matrix())
            .map_err(|e| Error::scenario("noise.r", e.to_string()))
    }

    /// Process noise of node `k`; the master clock gets no clock noise.
    pub fn process_noise(&self, k: usize) -> Result<ProcessNoise> {
        let (field, spec) = if Some(k) == self.mobile_id() {
            ("noise.mobile_q", &self.noise.mobile_q)
        } else {
            ("noise.anchor_q", &self.noise.anchor_q)
        };
        let mut q = spec.to_matrix();
        if Some(k) == self.clocks.master {
            for i in 0..5 {
                for j in [OFFSET, BIAS] {
                    q[(i, j)] = 0.0;
                    q[(j, i)] = 0.0;
                }
            }
        }
        ProcessNoise::new(q).map_err(|e| Error::scenario(field, e.to_string()))
    }

    /// Prior standard deviations `[pos, pos, pos, o, b]` of node `k`.
    pub fn prior_sigmas(&self, k: usize) -> [f64; 5] {
        let pos = if Some(k) == self.mobile_id() {
            self.prior.mobile_position_sigma
        } else {
            self.prior.anchor_position_sigma
        };
        let (o, b) = if Some(k) == self.clocks.master {
            (self.clocks.master_sigma, self.clocks.master_sigma)
        } else {
            (self.clocks.offset_sigma, self.clocks.bias_sigma)
        };
        [pos, pos, pos, o, b]
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::scenario(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        if self.n_steps < 1 {
            return Err(Error::scenario("n_steps", "must be at least 1"));
        }
        if !(self.delta_t.is_finite() && self.delta_t > 0.0) {
            return Err(Error::scenario("delta_t", "must be finite and > 0"));
        }
        for (i, a) in self.anchors.iter().enumerate() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::scenario(format!("anchors[{i}]"), "must be finite"));
            }
        }
        if self.n_nodes() < 2 {
            return Err(Error::scenario(
                "anchors",
                "the network needs at least 2 nodes",
            ));
        }
        if let Some(m) = &self.mobile {
            m.trajectory.validate("mobile.trajectory")?;
        }
        check_sigma("clocks.offset_sigma", self.clocks.offset_sigma)?;
        check_sigma("clocks.bias_sigma", self.clocks.bias_sigma)?;
        check_sigma(
            "prior.anchor_position_sigma",
            self.prior.anchor_position_sigma,
        )?;
        check_sigma(
            "prior.mobile_position_sigma",
            self.prior.mobile_position_sigma,
        )?;
        if !(self.clocks.master_sigma.is_finite() && self.clocks.master_sigma > 0.0) {
            return Err(Error::scenario(
                "clocks.master_sigma",
                "must be finite and > 0",
            ));
        }
        for k in 0..self.n_nodes() {
            if self.prior_sigmas(k).iter().any(|s| *s <= 0.0) {
                return Err(Error::scenario(
                    "prior",
                    format!("node {k} would get a singular prior covariance"),
                ));
            }
        }
        if let Some(m) = self.clocks.master {
            if m >= self.n_nodes() {
                return Err(Error::scenario(
                    "clocks.master",
                    format!("node {m} does not exist"),
                ));
            }
        }
        self.measurement_noise()?;
        ProcessNoise::new(self.noise.anchor_q.to_matrix())
            .map_err(|e| Error::scenario("noise.anchor_q", e.to_string()))?;
        ProcessNoise::new(self.noise.mobile_q.to_matrix())
            .map_err(|e| Error::scenario("noise.mobile_q", e.to_string()))?;
        self.ranging.validate()?;
        let pi = self.pi_max();
        if pi.is_nan() || pi < 0.0 {
            return Err(Error::scenario(
                "trigger.pi_max",
                "must be >= 0 (or \"inf\")",
            ));
        }
        if let Some(l) = self.trigger.leader {
            if l >= self.n_nodes() {
                return Err(Error::scenario(
                    "trigger.leader",
                    format!("node {l} does not exist"),
                ));
            }
        }
        if let TopologySpec::KNearest { k } = self.topology {
            if k == 0 || k >= self.n_nodes() {
                return Err(Error::scenario(
                    "topology.k",
                    format!("must satisfy 0 < k < {} (number of nodes)", self.n_nodes()),
                ));
            }
        }
        let mut initial: Vec<Vector3<f64>> =
            self.anchors.iter().map(|a| Vector3::from(*a)).collect();
        if let Some(m) = &self.mobile {
            initial.push(m.trajectory.start());
        }
        for i in 0..initial.len() {
            for j in (i + 1)..initial.len() {
                if (initial[i] - initial[j]).norm() < crate::measurement_model::DISTANCE_EPSILON {
                    return Err(Error::scenario(
                        "anchors",
                        format!("nodes {i} and {j} start at the same position"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Apply `a.b.c=value` to a JSON tree. `value` is parsed as JSON when it can
/// be, otherwise taken as a string. Numeric segments index arrays.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::scenario(assignment, "override must look like key.path=value"))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::scenario(assignment, "empty override key"));
    }
    let value =
        serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        node = match node {
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| Error::scenario(path, format!("`{seg}` is not an array index")))?;
                let len = items.len();
                items.get_mut(idx).ok_or_else(|| {
                    Error::scenario(path, format!("index {idx} out of range (len {len})"))
                })?
            }
            Value::Object(map) => map.entry(seg.to_string()).or_insert(if last {
                Value::Null
            } else {
                Value::Object(Default::default())
            }),
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut()
                    .unwrap()
                    .entry(seg.to_string())
                    .or_insert(Value::Null)
            }
            _ => {
                return Err(Error::scenario(
                    path,
                    format!("cannot descend into `{seg}`"),
                ))
            }
        };
    }
    *node = value;
    Ok(())
}
