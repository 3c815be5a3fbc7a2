use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::network_sim::{MessageCount, RunLog, Scenario, Threshold};
use crate::{Error, Result};

/// Accuracy and cost of one run against its all-messages baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mean_error_m: f64,
    pub std_error_m: f64,
    pub total_messages: u64,
    pub baseline_messages: u64,
    pub saved_fraction: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `1 − messages / baseline`; zero when the baseline sent nothing.
pub fn saved_fraction(messages: u64, baseline: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        (1.0 - messages as f64 / baseline as f64).clamp(0.0, 1.0)
    }
}

pub fn summarize(log: &RunLog, baseline: &RunLog) -> Result<RunMetrics> {
    if log.steps.len() != baseline.steps.len() || log.n_nodes != baseline.n_nodes {
        return Err(Error::Comparison(format!(
            "run has {} steps × {} nodes, baseline {} × {}",
            log.steps.len(),
            log.n_nodes,
            baseline.steps.len(),
            baseline.n_nodes
        )));
    }
    let (mean, std) = mean_std(&log.position_errors());
    let total = log.totals.total();
    let base = baseline.totals.total();
    Ok(RunMetrics {
        mean_error_m: mean,
        std_error_m: std,
        total_messages: total,
        baseline_messages: base,
        saved_fraction: saved_fraction(total, base),
    })
}

/// The `summary.json` record of a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tool_version: String,
    pub schema_version: u32,
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub n_steps: usize,
    pub n_nodes: usize,
    pub leader: usize,
    pub pi_max: Threshold,
    pub trigger_count: usize,
    pub max_trigger_gap: Option<usize>,
    pub messages: MessageCount,
    pub metrics: RunMetrics,
}

impl RunSummary {
    pub fn new(scenario: &Scenario, log: &RunLog, baseline: &RunLog) -> Result<Self> {
        Ok(Self {
            tool_version: crate::VERSION.to_string(),
            schema_version: scenario.schema_version,
            scenario: scenario.name.clone(),
            config_hash: scenario.config_hash(),
            seed: scenario.seed,
            n_steps: scenario.n_steps,
            n_nodes: log.n_nodes,
            leader: log.leader,
            pi_max: scenario.trigger.pi_max,
            trigger_count: log.trigger_count(),
            max_trigger_gap: log.max_trigger_gap(),
            messages: log.totals,
            metrics: summarize(log, baseline)?,
        })
    }
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mx) * (b - my);
        dx += (a - mx).powi(2);
        dy += (b - my).powi(2);
    }
    if dx == 0.0 || dy == 0.0 {
        None
    } else {
        Some(num / (dx * dy).sqrt())
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// One `sweep.csv` row: a threshold aggregated over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pi_max: Threshold,
    pub seed_count: usize,
    /// Summed over seeds.
    pub msgs_total: u64,
    pub saved_frac: f64,
    /// Over the pooled per-step errors of all seeds.
    pub mean_err_m: f64,
    pub std_err_m: f64,
}

pub const SWEEP_COLUMNS: [&str; 6] = [
    "pi_max",
    "seed_count",
    "msgs_total",
    "saved_frac",
    "mean_err_m",
    "std_err_m",
];

/// Aggregate runs at one threshold. `baselines[i]` is the π_max = 0 run
/// with the same seed as `runs[i]`.
pub fn aggregate(pi_max: f64, runs: &[RunLog], baselines: &[RunLog]) -> Result<SweepRow> {
    if runs.is_empty() || runs.len() != baselines.len() {
        return Err(Error::Comparison(format!(
            "{} runs against {} baselines",
            runs.len(),
            baselines.len()
        )));
    }
    let mut errors = Vec::new();
    let (mut msgs, mut base) = (0u64, 0u64);
    for (r, b) in runs.iter().zip(baselines) {
        summarize(r, b)?;
        errors.extend(r.position_errors());
        msgs += r.totals.total();
        base += b.totals.total();
    }
    let (mean, std) = mean_std(&errors);
    Ok(SweepRow {
        pi_max: Threshold(pi_max),
        seed_count: runs.len(),
        msgs_total: msgs,
        saved_frac: saved_fraction(msgs, base),
        mean_err_m: mean,
        std_err_m: std,
    })
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        wr.write_record([
            r.pi_max.to_string(),
            r.seed_count.to_string(),
            r.msgs_total.to_string(),
            format!("{:?}", r.saved_frac),
            format!("{:?}", r.mean_err_m),
            format!("{:?}", r.std_err_m),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(r: R) -> Result<Vec<SweepRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != SWEEP_COLUMNS {
        return Err(Error::Dimension(format!(
            "unexpected sweep header {header:?}"
        )));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<f64> {
            field(i).parse().map_err(|_| {
                Error::Dimension(format!(
                    "bad number {:?} in column {}",
                    field(i),
                    SWEEP_COLUMNS[i]
                ))
            })
        };
        let int = |i: usize| -> Result<u64> {
            field(i).parse().map_err(|_| {
                Error::Dimension(format!(
                    "bad integer {:?} in column {}",
                    field(i),
                    SWEEP_COLUMNS[i]
                ))
            })
        };
        out.push(SweepRow {
            pi_max: field(0).parse().map_err(Error::Dimension)?,
            seed_count: int(1)? as usize,
            msgs_total: int(2)?,
            saved_frac: num(3)?,
            mean_err_m: num(4)?,
            std_err_m: num(5)?,
        });
    }
    Ok(out)
}
