//! Recursions for the covariance `Σ` of the stacked estimation error of all
//! nodes, one per filter step.
//!
//! Blocks are 5×5 and ordered by node id. The diffusion step uses the row
//! convention `x̂_k = Σ_j C_kj ψ_j`, so the stacked error maps through
//! `𝒞 = C ⊗ I₅` and `Σ ← 𝒞 Σ 𝒞ᵀ`.

use nalgebra::{DMatrix, Matrix5};

use crate::linalg;
use crate::state_model::STATE_DIM;
use crate::{Error, Result};

/// Symmetry and PSD tolerance, applied after scaling by `diag(Σ)^{-1/2}`.
pub const SIGMA_TOL: f64 = 1e-9;

/// Covariance of the stacked `5N` error vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalCovariance {
    sigma: DMatrix<f64>,
}

impl GlobalCovariance {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        let n = sigma.nrows();
        if n == 0 || sigma.ncols() != n || !n.is_multiple_of(STATE_DIM) {
            return Err(Error::Dimension(format!(
                "global covariance must be 5N×5N, got {:?}",
                sigma.shape()
            )));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::CovarianceCorrupt("non-finite entry in Σ".into()));
        }
        let scale: Vec<f64> = (0..n).map(|i| sigma[(i, i)].max(0.0)).collect();
        let scaled = DMatrix::from_fn(n, n, |i, j| {
            let d = (scale[i] * scale[j]).sqrt();
            if d > 0.0 {
                sigma[(i, j)] / d
            } else {
                sigma[(i, j)]
            }
        });
        if linalg::asymmetry(&scaled) > SIGMA_TOL {
            return Err(Error::CovarianceCorrupt(format!(
                "Σ asymmetry {:e}",
                linalg::asymmetry(&scaled)
            )));
        }
        let min = linalg::min_eigenvalue(&scaled);
        if min < -SIGMA_TOL {
            return Err(Error::CovarianceCorrupt(format!(
                "Σ scaled minimum eigenvalue {min:e}"
            )));
        }
        Ok(Self {
            sigma: (&sigma + sigma.transpose()) * 0.5,
        })
    }

    /// `𝟏𝟏ᵀ ⊗ Π₀`: every node starts with the same error.
    pub fn common_initial(pi0: &Matrix5<f64>, n_nodes: usize) -> Result<Self> {
        Self::new(stack_common(pi0, n_nodes))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.sigma
    }

    pub fn n_nodes(&self) -> usize {
        self.sigma.nrows() / STATE_DIM
    }

    pub fn block(&self, k: usize) -> Matrix5<f64> {
        self.sigma
            .fixed_view::<5, 5>(k * STATE_DIM, k * STATE_DIM)
            .into_owned()
    }

    /// `Σ_k tr(W Σ_kk Wᵀ)` for the position selector.
    pub fn monitored_trace(&self, w: &nalgebra::Matrix3x5<f64>) -> f64 {
        (0..self.n_nodes())
            .map(|k| (w * self.block(k) * w.transpose()).trace())
            .sum()
    }
}

/// `𝟏𝟏ᵀ ⊗ M`: the same noise enters every node's error.
pub fn stack_common(m: &Matrix5<f64>, n_nodes: usize) -> DMatrix<f64> {
    let d = STATE_DIM * n_nodes;
    DMatrix::from_fn(d, d, |i, j| m[(i % STATE_DIM, j % STATE_DIM)])
}

/// `blockdiag(M_1, …, M_N)`: independent noise per node.
pub fn stack_independent(blocks: &[Matrix5<f64>]) -> DMatrix<f64> {
    linalg::block_diagonal(blocks)
}

fn check_square(name: &str, m: &DMatrix<f64>, dim: usize) -> Result<()> {
    if m.shape() != (dim, dim) {
        return Err(Error::Dimension(format!(
            "{name} is {:?}, expected {dim}×{dim}",
            m.shape()
        )));
    }
    Ok(())
}

/// `Σ ← 𝓕 Σ 𝓕ᵀ + 𝒬` with `𝓕 = blockdiag(F_k)`.
pub fn global_sigma_time_update(
    sigma: &GlobalCovariance,
    f_blocks: &[Matrix5<f64>],
    q: &DMatrix<f64>,
) -> Result<GlobalCovariance> {
    let dim = sigma.sigma.nrows();
    if f_blocks.len() * STATE_DIM != dim {
        return Err(Error::Dimension(format!(
            "{} transition blocks for a {}-node Σ",
            f_blocks.len(),
            sigma.n_nodes()
        )));
    }
    check_square("stacked Q", q, dim)?;
    let f = linalg::block_diagonal(f_blocks);
    GlobalCovariance::new(&f * &sigma.sigma * f.transpose() + q)
}

/// `Σ ← G Σ Gᵀ + 𝒫 𝓛ᵀ ℋᵀ R⁻¹ ℋ 𝓛 𝒫` with `𝒫 = blockdiag(P_k,t|t)`,
/// `G = 𝒫 blockdiag(P_k,t|t−1)⁻¹`, `ℋ = blockdiag(H_l)` over measurement
/// sources and `𝓛 = L ⊗ I₅`. `L_lk = 1` when node `k` uses source `l`.
pub fn global_sigma_measurement_update(
    sigma: &GlobalCovariance,
    p_posterior: &[Matrix5<f64>],
    p_prior: &[Matrix5<f64>],
    h_blocks: &[DMatrix<f64>],
    l: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<GlobalCovariance> {
    let n = sigma.n_nodes();
    if p_posterior.len() != n || p_prior.len() != n || h_blocks.len() != n {
        return Err(Error::Dimension(format!(
            "expected {n} posterior, prior and observation blocks, got {}, {}, {}",
            p_posterior.len(),
            p_prior.len(),
            h_blocks.len()
        )));
    }
    if l.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "L is {:?}, expected {n}×{n}",
            l.shape()
        )));
    }
    let rows: usize = h_blocks.iter().map(|h| h.nrows()).sum();
    if h_blocks.iter().any(|h| h.ncols() != STATE_DIM) {
        return Err(Error::Dimension(
            "observation blocks must have 5 columns".into(),
        ));
    }
    check_square("R", r, rows)?;

    let mut gain_blocks = Vec::with_capacity(n);
    for (k, (post, prior)) in p_posterior.iter().zip(p_prior).enumerate() {
        let prior_inv = linalg::spd_inverse(prior).map_err(|e| {
            Error::NumericalFailure(format!("prior block of node {k} is singular: {e}"))
        })?;
        gain_blocks.push(post * prior_inv);
    }
    let g = linalg::block_diagonal(&gain_blocks);
    let p = linalg::block_diagonal(p_posterior);
    let h = linalg::block_diagonal(h_blocks);
    let r_inv = linalg::spd_inverse(r)?;
    let ll = linalg::kron_identity(l, STATE_DIM);
    let hl = &h * &ll;
    let noise = &p * hl.transpose() * &r_inv * &hl * &p;
    GlobalCovariance::new(&g * &sigma.sigma * g.transpose() + noise)
}

/// `Σ ← 𝒞 Σ 𝒞ᵀ`, `𝒞 = C ⊗ I₅`.
pub fn global_sigma_diffusion_update(
    sigma: &GlobalCovariance,
    c: &DMatrix<f64>,
) -> Result<GlobalCovariance> {
    let n = sigma.n_nodes();
    if c.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "C is {:?}, expected {n}×{n}",
            c.shape()
        )));
    }
    for i in 0..n {
        let s: f64 = c.row(i).sum();
        if (s - 1.0).abs() > 1e-12 || c.row(i).iter().any(|v| *v < 0.0) {
            return Err(Error::Precondition(format!(
                "row {i} of C is not stochastic (sum {s})"
            )));
        }
    }
    let cc = linalg::kron_identity(c, STATE_DIM);
    GlobalCovariance::new(&cc * &sigma.sigma * cc.transpose())
}
