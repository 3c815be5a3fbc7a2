use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::global::GlobalCovariance;
use super::linear_model::LinearDiffusionModel;
use crate::linalg;
use crate::network_sim::{simulate, Scenario};
use crate::state_model::STATE_DIM;
use crate::{Error, Result};

pub const MIN_RUNS: usize = 100;

/// Second-moment matrix `(1/n) Σ eᵢ eᵢᵀ` of the stacked errors returned by
/// `sample`. Run `i` draws from its own ChaCha stream `i` of `seed`.
pub fn monte_carlo_covariance<F>(
    n_runs: usize,
    seed: u64,
    mut sample: F,
) -> Result<GlobalCovariance>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<DVector<f64>>,
{
    if n_runs < MIN_RUNS {
        return Err(Error::Precondition(format!(
            "need at least {MIN_RUNS} runs, got {n_runs}"
        )));
    }
    let mut acc: Option<DMatrix<f64>> = None;
    for run in 0..n_runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(run as u64);
        let e = sample(&mut rng)?;
        let outer = &e * e.transpose();
        match acc.as_mut() {
            Some(a) if a.shape() == outer.shape() => *a += outer,
            Some(_) => {
                return Err(Error::Dimension(format!(
                    "run {run} returned {} errors",
                    e.len()
                )))
            }
            None => acc = Some(outer),
        }
    }
    GlobalCovariance::new(acc.expect("at least one run") / n_runs as f64)
}

/// Stacked error of every node at the last step of one simulator run.
pub fn final_errors(scenario: &Scenario) -> Result<DVector<f64>> {
    let log = simulate(scenario)?;
    let last = log.steps.last().expect("n_steps >= 1");
    let mut e = DVector::zeros(log.n_nodes * STATE_DIM);
    for k in 0..log.n_nodes {
        let d = last.estimates[k].to_vector() - last.truth[k].to_vector();
        e.rows_mut(k * STATE_DIM, STATE_DIM).copy_from(&d);
    }
    Ok(e)
}

/// [`monte_carlo_covariance`] over full simulator runs with seeds
/// `scenario.seed, scenario.seed + 1, …`.
pub fn monte_carlo_scenario_covariance(
    scenario: &Scenario,
    n_runs: usize,
) -> Result<GlobalCovariance> {
    let mut run = 0u64;
    monte_carlo_covariance(n_runs, scenario.seed, |_| {
        let s = Scenario {
            seed: scenario.seed.wrapping_add(run),
            ..scenario.clone()
        };
        run += 1;
        final_errors(&s)
    })
}

/// `Σ` recursion against the Monte Carlo second moment of the actual filter
/// errors on a linear model.
#[derive(Debug, Clone)]
pub struct OracleComparison {
    pub n_runs: usize,
    pub n_steps: usize,
    pub triggers: usize,
    pub sigma: GlobalCovariance,
    pub sample: GlobalCovariance,
    /// [`linalg::normalized_frobenius_distance`] of sample against `Σ`.
    pub distance: f64,
}

pub fn compare_linear_model(
    model: &LinearDiffusionModel,
    n_steps: usize,
    n_runs: usize,
    seed: u64,
) -> Result<OracleComparison> {
    let (sigma, history) = model.sigma_recursion(n_steps)?;
    let sample = monte_carlo_covariance(n_runs, seed, |rng| model.sample_errors(n_steps, rng))?;
    let distance = linalg::normalized_frobenius_distance(sample.matrix(), sigma.matrix());
    Ok(OracleComparison {
        n_runs,
        n_steps,
        triggers: history.iter().filter(|h| h.triggered).count(),
        sigma,
        sample,
        distance,
    })
}
