use std::io::{Read, Write};
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::measurement_model::{message_cost, MeasurementKind};
use crate::state_model::NodeState;
use crate::Result;

/// CSV column order of `runlog.csv`.
pub const RUNLOG_COLUMNS: [&str; 15] = [
    "step",
    "node",
    "x",
    "y",
    "z",
    "o",
    "b",
    "est_x",
    "est_y",
    "est_z",
    "est_o",
    "est_b",
    "trace",
    "triggered",
    "msgs_step",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCount {
    pub counter_difference: u64,
    pub single_sided: u64,
    pub double_sided: u64,
    pub notification: u64,
}

impl MessageCount {
    /// Record `exchanges` ranging exchanges of `kind`.
    pub fn add_kind(&mut self, kind: MeasurementKind, exchanges: u64) {
        let n = exchanges * message_cost(kind);
        match kind {
            MeasurementKind::CounterDifference => self.counter_difference += n,
            MeasurementKind::SingleSided => self.single_sided += n,
            MeasurementKind::DoubleSided => self.double_sided += n,
        }
    }

    pub fn measurement_total(&self) -> u64 {
        self.counter_difference + self.single_sided + self.double_sided
    }

    pub fn total(&self) -> u64 {
        self.measurement_total() + self.notification
    }
}

impl AddAssign for MessageCount {
    fn add_assign(&mut self, o: Self) {
        self.counter_difference += o.counter_difference;
        self.single_sided += o.single_sided;
        self.double_sided += o.double_sided;
        self.notification += o.notification;
    }
}

impl std::iter::Sum for MessageCount {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |mut acc, m| {
            acc += m;
            acc
        })
    }
}

/// Everything logged for one step, indexed by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub truth: Vec<NodeState>,
    /// Estimates at the end of the step.
    pub estimates: Vec<NodeState>,
    /// `tr(W P Wᵀ)` after the time update.
    pub prior_traces: Vec<f64>,
    /// `tr(W P Wᵀ)` at the end of the step.
    pub posterior_traces: Vec<f64>,
    pub triggered: Vec<bool>,
    pub messages: Vec<MessageCount>,
}

impl StepRecord {
    pub fn any_triggered(&self) -> bool {
        self.triggered.iter().any(|&t| t)
    }

    pub fn message_total(&self) -> MessageCount {
        self.messages.iter().copied().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub n_nodes: usize,
    pub mobile: Option<usize>,
    pub leader: usize,
    pub pi_max: f64,
    pub delta_t: f64,
    pub steps: Vec<StepRecord>,
    pub totals: MessageCount,
}

impl RunLog {
    /// Leader's monitored trace after each time update.
    pub fn leader_traces(&self) -> Vec<f64> {
        self.steps
            .iter()
            .map(|s| s.prior_traces[self.leader])
            .collect()
    }

    pub fn triggered_steps(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| s.any_triggered())
            .map(|s| s.step)
            .collect()
    }

    pub fn trigger_count(&self) -> usize {
        self.steps.iter().filter(|s| s.any_triggered()).count()
    }

    /// Largest step difference between consecutive triggers, if there are two.
    pub fn max_trigger_gap(&self) -> Option<usize> {
        self.triggered_steps().windows(2).map(|w| w[1] - w[0]).max()
    }

    /// Per-step 3-D position error of the mobile node (or node 0 without one).
    pub fn position_errors(&self) -> Vec<f64> {
        let k = self.mobile.unwrap_or(0);
        self.steps
            .iter()
            .map(|s| (s.estimates[k].position - s.truth[k].position).norm())
            .collect()
    }

    pub fn rows(&self) -> Vec<RunLogRow> {
        let mut out = Vec::with_capacity(self.steps.len() * self.n_nodes);
        for s in &self.steps {
            for k in 0..self.n_nodes {
                let (t, e) = (&s.truth[k], &s.estimates[k]);
                out.push(RunLogRow {
                    step: s.step,
                    node: k,
                    x: t.position.x,
                    y: t.position.y,
                    z: t.position.z,
                    o: t.offset,
                    b: t.bias,
                    est_x: e.position.x,
                    est_y: e.position.y,
                    est_z: e.position.z,
                    est_o: e.offset,
                    est_b: e.bias,
                    trace: s.prior_traces[k],
                    triggered: u8::from(s.triggered[k]),
                    msgs_step: s.messages[k].total(),
                });
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows(w, &self.rows())
    }
}

/// One `runlog.csv` row. `trace` is the node's monitored trace after the
/// time update; `msgs_step` counts messages attributed to the node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub step: usize,
    pub node: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub o: f64,
    pub b: f64,
    pub est_x: f64,
    pub est_y: f64,
    pub est_z: f64,
    pub est_o: f64,
    pub est_b: f64,
    pub trace: f64,
    pub triggered: u8,
    pub msgs_step: u64,
}

// `{:?}` on f64 is the shortest representation that parses back exactly.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_rows<W: Write>(w: W, rows: &[RunLogRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(RUNLOG_COLUMNS)?;
    for r in rows {
        wr.write_record([
            r.step.to_string(),
            r.node.to_string(),
            fmt_f64(r.x),
            fmt_f64(r.y),
            fmt_f64(r.z),
            fmt_f64(r.o),
            fmt_f64(r.b),
            fmt_f64(r.est_x),
            fmt_f64(r.est_y),
            fmt_f64(r.est_z),
            fmt_f64(r.est_o),
            fmt_f64(r.est_b),
            fmt_f64(r.trace),
            r.triggered.to_string(),
            r.msgs_step.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(r: R) -> Result<Vec<RunLogRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != RUNLOG_COLUMNS {
        return Err(crate::Error::Dimension(format!(
            "unexpected runlog header {header:?}"
        )));
    }
    rd.deserialize()
        .map(|row| row.map_err(Into::into))
        .collect()
}
