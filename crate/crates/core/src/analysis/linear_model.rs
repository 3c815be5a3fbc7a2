//! A linear sub-model on which the global covariance recursions are exact.
//!
//! All nodes estimate one common 5-dim state, observed through fixed
//! Jacobians taken at a frozen geometry: node `l` contributes `y_l = H_l x + v_l`
//! and node `k` fuses the `y_l` of every `l ∈ 𝒩_k`. Because `P` never
//! depends on data, the trigger schedule is deterministic and the same in
//! every Monte-Carlo run.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix5, Vector3, Vector5};
use rand::Rng;
use rand_distr::StandardNormal;

use super::global::{self, GlobalCovariance};
use crate::filter_node::{
    self, FilterState, IntermediateEstimate, LinearizedObservation, TriggerPolicy,
};
use crate::linalg::{self, DynRows5};
use crate::measurement_model::{self, MeasurementNoise, RangingParams};
use crate::network_sim::Topology;
use crate::state_model::{self, NodeState, ProcessNoise, STATE_DIM};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDiffusionModel {
    pub delta_t: f64,
    pub q: ProcessNoise,
    pub x0: Vector5<f64>,
    pub pi0: Matrix5<f64>,
    /// `H_l`, one per node.
    pub h: Vec<DynRows5>,
    pub r: Vec<DMatrix<f64>>,
    pub topology: Topology,
    /// Row-stochastic, zero outside each neighbourhood.
    pub c: DMatrix<f64>,
    pub trigger: TriggerPolicy,
    pub leader: usize,
}

/// Per-step trace of the recursion, for the monotonicity checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaStep {
    pub step: usize,
    pub triggered: bool,
    /// `Σ_k tr(W Σ_kk Wᵀ)` before and after the time update.
    pub before_time_update: f64,
    pub after_time_update: f64,
    pub after_measurement: f64,
    pub after_diffusion: f64,
}

impl LinearDiffusionModel {
    /// Three nodes on a path `0 − 1 − 2` sharing one target at a frozen
    /// position, with a non-symmetric diffusion matrix.
    pub fn three_node(pi_max: f64) -> Result<Self> {
        let ranging = RangingParams::default();
        let target = NodeState::new(Vector3::new(4.0, 3.0, 1.2), 0.0, 0.0);
        let anchors = [
            Vector3::new(0.5, 0.5, 2.5),
            Vector3::new(9.5, 0.5, 2.5),
            Vector3::new(5.0, 8.5, 1.0),
        ];
        let noise = MeasurementNoise::from_std(1e-9, 0.3, 0.1)?;
        // Every node ranges to all three anchors; noise grows with the node id.
        let mut rows = Vec::new();
        for a in anchors {
            let jac = measurement_model::jacobian_h(&target, &NodeState::at(a), &ranging)?;
            rows.extend((0..3).map(|i| jac.row(i).into_owned()));
        }
        let stacked = DynRows5::from_rows(&rows);
        let base = linalg::block_diagonal(&vec![
            DMatrix::from_iterator(
                3,
                3,
                noise.matrix().iter().copied()
            );
            3
        ]);
        let h = vec![stacked; 3];
        let r = (0..3).map(|l| &base * (1.0 + l as f64)).collect();
        let topology = Topology::from_adjacency(vec![
            vec![false, true, false],
            vec![true, false, true],
            vec![false, true, false],
        ])?;
        let c = DMatrix::from_row_slice(3, 3, &[0.6, 0.4, 0.0, 0.2, 0.5, 0.3, 0.0, 0.7, 0.3]);
        Ok(Self {
            delta_t: 0.1,
            q: ProcessNoise::diagonal([1e-3, 1e-3, 1e-3, 1e-22, 1e-22])?,
            x0: target.to_vector(),
            pi0: Matrix5::from_diagonal(&Vector5::new(0.25, 0.25, 0.25, 1e-18, 1e-18)),
            h,
            r,
            topology,
            c,
            trigger: TriggerPolicy::position(pi_max)?,
            leader: 0,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.topology.n_nodes()
    }

    fn weights(&self, k: usize) -> BTreeMap<usize, f64> {
        self.topology
            .neighborhood(k)
            .iter()
            .map(|&j| (j, self.c[(k, j)]))
            .collect()
    }

    fn initial_filters(&self) -> Result<Vec<FilterState>> {
        (0..self.n_nodes())
            .map(|k| {
                FilterState::new(
                    k,
                    NodeState::from_vector(&self.x0),
                    self.pi0,
                    self.weights(k),
                )
            })
            .collect()
    }

    fn observation(
        &self,
        l: usize,
        y: &DVector<f64>,
        x_hat: &Vector5<f64>,
    ) -> Result<LinearizedObservation> {
        let innovation = y - &self.h[l] * x_hat;
        LinearizedObservation::new(self.h[l].clone(), innovation, self.r[l].clone())
    }

    /// Posterior covariances for a given set of priors; the data do not matter.
    fn posterior_covariances(
        &self,
        priors: &[FilterState],
        step: usize,
    ) -> Result<Vec<FilterState>> {
        priors
            .iter()
            .enumerate()
            .map(|(k, fs)| {
                let obs = self
                    .topology
                    .neighborhood(k)
                    .iter()
                    .map(|&l| {
                        self.observation(l, &DVector::zeros(self.h[l].nrows()), &Vector5::zeros())
                    })
                    .collect::<Result<Vec<_>>>()?;
                filter_node::information_update(fs, &obs, step).map(|(_, post)| post)
            })
            .collect()
    }

    /// Trigger flags of steps `0..n_steps`.
    pub fn schedule(&self, n_steps: usize) -> Result<Vec<bool>> {
        let mut filters = self.initial_filters()?;
        let mut out = Vec::with_capacity(n_steps);
        for t in 0..n_steps {
            if t > 0 {
                filters = filters
                    .iter()
                    .map(|f| filter_node::time_update(f, self.delta_t, &self.q))
                    .collect::<Result<_>>()?;
            }
            let fire = filter_node::trigger_check(&filters[self.leader].p, &self.trigger);
            if fire {
                filters = self.posterior_covariances(&filters, t)?;
            }
            out.push(fire);
        }
        Ok(out)
    }

    /// Run the `Σ` recursions for `n_steps` steps.
    pub fn sigma_recursion(&self, n_steps: usize) -> Result<(GlobalCovariance, Vec<SigmaStep>)> {
        let n = self.n_nodes();
        let w = *self.trigger.w();
        let f_blocks = vec![state_model::transition_matrix(self.delta_t); n];
        let q = global::stack_common(self.q.matrix(), n);
        let r = linalg::block_diagonal(&self.r);
        let h_blocks: Vec<DMatrix<f64>> = self
            .h
            .iter()
            .map(|h| DMatrix::from_iterator(h.nrows(), STATE_DIM, h.iter().copied()))
            .collect();
        let mut sigma = GlobalCovariance::common_initial(&self.pi0, n)?;
        let mut filters = self.initial_filters()?;
        let mut history = Vec::with_capacity(n_steps);
        for t in 0..n_steps {
            let before = sigma.monitored_trace(&w);
            if t > 0 {
                sigma = global::global_sigma_time_update(&sigma, &f_blocks, &q)?;
                filters = filters
                    .iter()
                    .map(|f| filter_node::time_update(f, self.delta_t, &self.q))
                    .collect::<Result<_>>()?;
            }
            let after_tu = sigma.monitored_trace(&w);
            let fire = filter_node::trigger_check(&filters[self.leader].p, &self.trigger);
            let (mut after_mu, mut after_diff) = (after_tu, after_tu);
            if fire {
                let posts = self.posterior_covariances(&filters, t)?;
                let prior_p: Vec<Matrix5<f64>> = filters.iter().map(|f| f.p).collect();
                let post_p: Vec<Matrix5<f64>> = posts.iter().map(|f| f.p).collect();
                sigma = global::global_sigma_measurement_update(
                    &sigma,
                    &post_p,
                    &prior_p,
                    &h_blocks,
                    self.topology.l(),
                    &r,
                )?;
                after_mu = sigma.monitored_trace(&w);
                sigma = global::global_sigma_diffusion_update(&sigma, &self.c)?;
                after_diff = sigma.monitored_trace(&w);
                filters = posts;
            }
            history.push(SigmaStep {
                step: t,
                triggered: fire,
                before_time_update: before,
                after_time_update: after_tu,
                after_measurement: after_mu,
                after_diffusion: after_diff,
            });
        }
        Ok((sigma, history))
    }

    /// One run of the actual filters; returns the stacked error `x̂_k − x`
    /// after the last step.
    pub fn sample_errors<G: Rng + ?Sized>(
        &self,
        n_steps: usize,
        rng: &mut G,
    ) -> Result<DVector<f64>> {
        let n = self.n_nodes();
        let to_dyn = |m: &Matrix5<f64>| DMatrix::from_iterator(5, 5, m.iter().copied());
        let pi0_factor = linalg::psd_factor(&to_dyn(&self.pi0));
        let q_factor = linalg::psd_factor(&to_dyn(self.q.matrix()));
        let r_factor: Vec<DMatrix<f64>> = self.r.iter().map(linalg::psd_factor).collect();
        let normal = |rng: &mut G, d: usize| {
            DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
        };

        let mut x = DVector::from_column_slice(self.x0.as_slice()) + &pi0_factor * normal(rng, 5);
        let mut filters = self.initial_filters()?;
        let f = state_model::transition_matrix(self.delta_t);
        let fd = to_dyn(&f);
        for t in 0..n_steps {
            if t > 0 {
                x = &fd * x + &q_factor * normal(rng, 5);
                filters = filters
                    .iter()
                    .map(|fs| filter_node::time_update(fs, self.delta_t, &self.q))
                    .collect::<Result<_>>()?;
            }
            if !filter_node::trigger_check(&filters[self.leader].p, &self.trigger) {
                continue;
            }
            let ys: Vec<DVector<f64>> = (0..n)
                .map(|l| {
                    let m = self.h[l].nrows();
                    &self.h[l] * &x + &r_factor[l] * normal(rng, m)
                })
                .collect();
            let mut psis = Vec::with_capacity(n);
            let mut posts = Vec::with_capacity(n);
            for (k, fs) in filters.iter().enumerate() {
                let x_hat = fs.x_hat.to_vector();
                let obs = self
                    .topology
                    .neighborhood(k)
                    .iter()
                    .map(|&l| self.observation(l, &ys[l], &x_hat))
                    .collect::<Result<Vec<_>>>()?;
                let (psi, post) = filter_node::information_update(fs, &obs, t)?;
                psis.push(psi);
                posts.push(post);
            }
            for (k, post) in posts.iter_mut().enumerate() {
                let held: BTreeMap<usize, IntermediateEstimate> = self
                    .topology
                    .neighborhood(k)
                    .iter()
                    .map(|&j| (j, psis[j]))
                    .collect();
                post.x_hat = filter_node::diffusion_update(&held, post.diffusion_weights())?;
            }
            filters = posts;
        }
        let mut err = DVector::zeros(n * STATE_DIM);
        for (k, fs) in filters.iter().enumerate() {
            let e = fs.x_hat.to_vector() - Vector5::from_column_slice(x.as_slice());
            err.rows_mut(k * STATE_DIM, STATE_DIM).copy_from(&e);
        }
        if err.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(
                "non-finite error in linear model run".into(),
            ));
        }
        Ok(err)
    }
}
