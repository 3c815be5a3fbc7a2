//! Ground-truth world, topology, leader-triggered orchestration and message
//! accounting.
//!
//! Each step runs as a barrier-synchronised pipeline: propagate the truth,
//! time-update every filter, test the trigger, and on a trigger have every
//! node measure all of its neighbours, update, exchange `ψ` and combine.
//!
//! Nodes estimate only their own state. Node `k` keeps, for every neighbour
//! `j`, its last received copy of `j`'s estimate (propagated by `f` between
//! exchanges); measurements are linearised around that copy. The combination
//! at node `k` runs over the copies of `ψ_k` held across `𝒩_k`, which the
//! exchange has just refreshed.

mod runlog;
mod scenario;
mod topology;
mod trajectory;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix5, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use runlog::{
    read_rows, write_rows, MessageCount, RunLog, RunLogRow, StepRecord, RUNLOG_COLUMNS,
};
pub use scenario::{
    apply_override, ClockSpec, Cov3, Cov5, MobileSpec, NoiseSpec, NotificationCost, PriorSpec,
    Scenario, Threshold, TriggerMode, TriggerSpec, SCHEMA_VERSION,
};
pub use topology::{build_topology, metropolis_weights, Topology, TopologySpec};
pub use trajectory::{generate_trajectory, Bounds, TrajectoryModel};

use crate::filter_node::{
    self, FilterState, IntermediateEstimate, LinearizedObservation, NeighborMeasurement,
    TriggerPolicy,
};
use crate::linalg;
use crate::measurement_model::{self, MeasurementNoise};
use crate::state_model::{self, NodeState, ProcessNoise, BIAS, OFFSET};
use crate::Result;

const STREAM_INIT: u64 = 0;
const STREAM_TRAJECTORY: u64 = 1;
const STREAM_CLOCKS: u64 = 2;
const STREAM_MEASUREMENT_BASE: u64 = 1 << 32;

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Configured leader, else the mobile node, else node 0.
pub fn leader_election(scenario: &Scenario) -> usize {
    scenario
        .trigger
        .leader
        .or(scenario.mobile_id())
        .unwrap_or(0)
}

/// Fixed quantities of a run, handed to observers before the first step.
#[derive(Debug)]
pub struct SimSetup<'a> {
    pub scenario: &'a Scenario,
    pub topology: &'a Topology,
    pub leader: usize,
    pub policy: TriggerPolicy,
    pub process_noise: &'a [ProcessNoise],
    pub noise: MeasurementNoise,
    /// Filter states at step 0, before any update.
    pub initial: &'a [FilterState],
}

/// Hooks into the per-step pipeline, used by diagnostics.
#[allow(unused_variables)]
pub trait StepObserver {
    fn on_start(&mut self, setup: &SimSetup<'_>) -> Result<()> {
        Ok(())
    }
    fn on_time_update(&mut self, step: usize, before: &FilterState, after: &FilterState) {}
    fn on_measurement_update(
        &mut self,
        step: usize,
        prior: &FilterState,
        posterior: &FilterState,
        observations: &[LinearizedObservation],
    ) {
    }
    fn on_diffusion(&mut self, step: usize, before: &FilterState, after: &FilterState) {}
    fn on_step_end(&mut self, record: &StepRecord) {}
}

impl StepObserver for () {}

pub fn simulate(scenario: &Scenario) -> Result<RunLog> {
    simulate_observed(scenario, &mut ())
}

fn gaussian_vector<G: Rng + ?Sized>(rng: &mut G, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn simulate_observed<O: StepObserver + ?Sized>(
    scenario: &Scenario,
    observer: &mut O,
) -> Result<RunLog> {
    scenario.validate()?;
    let n = scenario.n_nodes();
    let mobile = scenario.mobile_id();
    let delta_t = scenario.delta_t;
    let leader = leader_election(scenario);
    let policy = scenario.trigger_policy()?;
    let noise = scenario.measurement_noise()?;
    let kinds = &scenario.measurements;
    let ranging = &scenario.ranging;

    let mut traj_rng = stream(scenario.seed, STREAM_TRAJECTORY);
    let trajectory = match &scenario.mobile {
        Some(m) => generate_trajectory(&m.trajectory, scenario.n_steps, delta_t, &mut traj_rng)?,
        None => Vec::new(),
    };

    let q: Vec<ProcessNoise> = (0..n)
        .map(|k| scenario.process_noise(k))
        .collect::<Result<_>>()?;
    let q_factor: Vec<DMatrix<f64>> = q
        .iter()
        .map(|q| linalg::psd_factor(&DMatrix::from_iterator(5, 5, q.matrix().iter().copied())))
        .collect();

    // Initial truth and estimates.
    let mut init_rng = stream(scenario.seed, STREAM_INIT);
    let mut truth: Vec<NodeState> = Vec::with_capacity(n);
    for k in 0..n {
        let position = if Some(k) == mobile {
            trajectory[0]
        } else {
            Vector3::from(scenario.anchors[k])
        };
        let (o, b) = if Some(k) == scenario.clocks.master {
            (0.0, 0.0)
        } else {
            let z: [f64; 2] = [
                init_rng.sample(StandardNormal),
                init_rng.sample(StandardNormal),
            ];
            (
                scenario.clocks.offset_sigma * z[0],
                scenario.clocks.bias_sigma * z[1],
            )
        };
        truth.push(NodeState::new(position, o, b));
    }
    let topology = build_topology(
        &scenario.topology,
        &truth.iter().map(|s| s.position).collect::<Vec<_>>(),
    )?;
    let mut filters: Vec<FilterState> = Vec::with_capacity(n);
    for (k, t) in truth.iter().enumerate() {
        let sigmas = scenario.prior_sigmas(k);
        let z = gaussian_vector(&mut init_rng, 5);
        let mut x = t.to_vector();
        for i in 0..5 {
            x[i] += sigmas[i] * z[i];
        }
        let p = Matrix5::from_diagonal(&sigmas.map(|s| s * s).into());
        filters.push(FilterState::new(
            k,
            NodeState::from_vector(&x),
            p,
            topology.weights_row(k),
        )?);
    }
    // contexts[k][j]: node k's copy of neighbour j's estimate.
    let mut contexts: Vec<BTreeMap<usize, NodeState>> = (0..n)
        .map(|k| {
            topology
                .neighbors(k)
                .map(|j| (j, filters[j].x_hat))
                .collect()
        })
        .collect();

    observer.on_start(&SimSetup {
        scenario,
        topology: &topology,
        leader,
        policy,
        process_noise: &q,
        noise,
        initial: &filters,
    })?;

    let mut clock_rng = stream(scenario.seed, STREAM_CLOCKS);
    let mut steps = Vec::with_capacity(scenario.n_steps);
    let mut totals = MessageCount::default();

    for t in 0..scenario.n_steps {
        let result: Result<StepRecord> = (|| {
            if t > 0 {
                for k in 0..n {
                    let z = gaussian_vector(&mut clock_rng, 5);
                    let w = &q_factor[k] * z;
                    let mut next = state_model::propagate(&truth[k], delta_t)?;
                    next.offset += w[OFFSET];
                    next.bias += w[BIAS];
                    if Some(k) == mobile {
                        next.position = trajectory[t];
                    }
                    truth[k] = next;
                }
                for k in 0..n {
                    let after = filter_node::time_update(&filters[k], delta_t, &q[k])?;
                    observer.on_time_update(t, &filters[k], &after);
                    filters[k] = after;
                    for copy in contexts[k].values_mut() {
                        *copy = state_model::propagate(copy, delta_t)?;
                    }
                }
            }
            let prior_traces: Vec<f64> =
                filters.iter().map(|f| f.monitored_trace(&policy)).collect();
            let triggered: Vec<bool> = match scenario.trigger.mode {
                TriggerMode::Leader => {
                    vec![filter_node::trigger_check(&filters[leader].p, &policy); n]
                }
                TriggerMode::Autonomous => filters
                    .iter()
                    .map(|f| filter_node::trigger_check(&f.p, &policy))
                    .collect(),
            };
            let mut messages = vec![MessageCount::default(); n];

            if triggered.iter().any(|&b| b) {
                let mut meas_rng = stream(scenario.seed, STREAM_MEASUREMENT_BASE + t as u64);
                let mut psis: BTreeMap<usize, IntermediateEstimate> = BTreeMap::new();
                for k in (0..n).filter(|&k| triggered[k]) {
                    let received: Vec<NeighborMeasurement> = topology
                        .neighbors(k)
                        .map(|j| NeighborMeasurement {
                            measurement: measurement_model::synthesize(
                                k,
                                j,
                                t,
                                &truth[k],
                                &truth[j],
                                ranging,
                                &noise,
                                &mut meas_rng,
                            ),
                            neighbor_estimate: contexts[k][&j],
                        })
                        .collect();
                    let obs =
                        filter_node::linearize(&filters[k], &received, &noise, ranging, kinds)?;
                    let (psi, posterior) = filter_node::information_update(&filters[k], &obs, t)?;
                    observer.on_measurement_update(t, &filters[k], &posterior, &obs);
                    filters[k] = posterior;
                    psis.insert(k, psi);
                    for kind in kinds.kinds() {
                        messages[k].add_kind(*kind, topology.degree(k) as u64);
                    }
                }
                for (&k, psi) in &psis {
                    let shared = NodeState::from_vector(&psi.psi);
                    for j in topology.neighbors(k) {
                        contexts[j].insert(k, shared);
                    }
                }
                for (&k, psi) in &psis {
                    let mut held: BTreeMap<usize, IntermediateEstimate> = BTreeMap::new();
                    for &j in topology.neighborhood(k) {
                        let copy = if j == k {
                            psi.psi
                        } else {
                            contexts[j][&k].to_vector()
                        };
                        held.insert(
                            j,
                            IntermediateEstimate {
                                psi: copy,
                                node_id: j,
                                step: t,
                            },
                        );
                    }
                    let combined =
                        filter_node::diffusion_update(&held, filters[k].diffusion_weights())?;
                    let mut after = filters[k].clone();
                    after.x_hat = combined;
                    observer.on_diffusion(t, &filters[k], &after);
                    filters[k] = after;
                }
                if scenario.trigger.mode == TriggerMode::Leader
                    && scenario.trigger.notification == NotificationCost::Unicast
                {
                    messages[leader].notification += (n - 1) as u64;
                }
            }

            Ok(StepRecord {
                step: t,
                truth: truth.clone(),
                estimates: filters.iter().map(|f| f.x_hat).collect(),
                prior_traces,
                posterior_traces: filters.iter().map(|f| f.monitored_trace(&policy)).collect(),
                triggered,
                messages,
            })
        })();
        let record = result.map_err(|e| e.at_step(t))?;
        observer.on_step_end(&record);
        totals += record.message_total();
        steps.push(record);
    }

    Ok(RunLog {
        n_nodes: n,
        mobile,
        leader,
        pi_max: scenario.pi_max(),
        delta_t,
        steps,
        totals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(overrides: &[&str]) -> Scenario {
        let mut o: Vec<String> = vec!["n_steps=200".into()];
        o.extend(overrides.iter().map(|s| s.to_string()));
        Scenario::default_with(&o).unwrap()
    }

    #[test]
    fn zero_threshold_fires_every_step() {
        let log = simulate(&short(&["trigger.pi_max=0"])).unwrap();
        assert_eq!(log.trigger_count(), 200);
        // 9 nodes × 8 neighbours × (1 + 2 + 3) + 8 notifications.
        assert!(log
            .steps
            .iter()
            .all(|s| s.message_total().total() == 9 * 8 * 6 + 8));
    }

    #[test]
    fn infinite_threshold_never_fires() {
        let log = simulate(&short(&["trigger.pi_max=\"inf\""])).unwrap();
        assert_eq!(log.trigger_count(), 0);
        assert_eq!(log.totals.total(), 0);
    }

    #[test]
    fn totals_equal_per_step_sums() {
        let log = simulate(&short(&[])).unwrap();
        let sum: MessageCount = log.steps.iter().map(|s| s.message_total()).sum();
        assert_eq!(sum, log.totals);
        for s in &log.steps {
            if !s.any_triggered() {
                assert_eq!(s.message_total().total(), 0);
            }
            assert_eq!(
                s.triggered[log.leader],
                s.prior_traces[log.leader] > log.pi_max
            );
        }
        assert!(log.trigger_count() > 0);
    }

    #[test]
    fn rerun_is_identical() {
        let s = short(&[]);
        assert_eq!(simulate(&s).unwrap(), simulate(&s).unwrap());
    }

    #[test]
    fn sawtooth_on_leader() {
        let log = simulate(&short(&["trigger.pi_max=0.05"])).unwrap();
        for s in log.steps.iter().filter(|s| s.any_triggered()) {
            assert!(s.posterior_traces[log.leader] < s.prior_traces[log.leader]);
        }
    }

    #[test]
    fn estimate_tracks_the_mobile() {
        let log = simulate(&short(&["trigger.pi_max=0"])).unwrap();
        let errs = log.position_errors();
        let late = &errs[100..];
        let mean = late.iter().sum::<f64>() / late.len() as f64;
        assert!(mean < 0.3, "mean error {mean}");
    }

    #[test]
    fn leader_choice() {
        assert_eq!(leader_election(&Scenario::default()), 8);
        assert_eq!(leader_election(&short(&["trigger.leader=3"])), 3);
        let s = short(&["mobile=null"]);
        assert_eq!(leader_election(&s), 0);
    }

    #[test]
    fn autonomous_and_free_notifications() {
        let log = simulate(&short(&[
            "trigger.mode=\"autonomous\"",
            "trigger.pi_max=0.05",
        ]))
        .unwrap();
        assert_eq!(log.totals.notification, 0);
        let log = simulate(&short(&[
            "trigger.notification=\"free\"",
            "trigger.pi_max=0",
        ]))
        .unwrap();
        assert_eq!(log.totals.notification, 0);
    }

    #[test]
    fn partially_connected_runs() {
        let log = simulate(&short(&[
            "topology={\"type\":\"k_nearest\",\"k\":4}",
            "trigger.pi_max=0",
        ]))
        .unwrap();
        assert_eq!(log.trigger_count(), 200);
    }
}
