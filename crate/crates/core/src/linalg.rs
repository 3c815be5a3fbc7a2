//! Small dense linear-algebra helpers shared by the filter and the analysis
//! code.
//!
//! Node covariances mix metres, seconds and dimensionless clock bias, so
//! their diagonal spans many orders of magnitude. Every symmetric
//! positive-definite solve therefore goes through diagonal equilibration:
//! `A = D B D` with `B` unit-diagonal, Cholesky on `B`, and the result
//! scaled back. The jitter applied on a failed factorisation is added to `B`,
//! i.e. it is relative to each diagonal entry of `A`.

use nalgebra::{
    allocator::Allocator, DMatrix, DefaultAllocator, Dim, Dyn, Matrix, OMatrix, Storage,
};

use crate::{Error, Result};

/// Jitter added to the unit-diagonal equilibrated matrix when Cholesky fails.
pub const SOLVE_JITTER: f64 = 1e-12;

/// `(m + mᵀ) / 2`.
pub fn symmetrize<D>(m: &OMatrix<f64, D, D>) -> OMatrix<f64, D, D>
where
    D: Dim,
    DefaultAllocator: Allocator<D, D>,
{
    (m + m.transpose()) * 0.5
}

/// Largest absolute difference between `m` and its transpose.
pub fn asymmetry<R: Dim, C: Dim, S: Storage<f64, R, C>>(m: &Matrix<f64, R, C, S>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn to_dynamic<R: Dim, C: Dim, S: Storage<f64, R, C>>(m: &Matrix<f64, R, C, S>) -> DMatrix<f64> {
    DMatrix::from_iterator(m.nrows(), m.ncols(), m.iter().copied())
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn symmetric_eigenvalues<R: Dim, C: Dim, S: Storage<f64, R, C>>(
    m: &Matrix<f64, R, C, S>,
) -> Vec<f64> {
    let d = to_dynamic(m);
    let sym = (&d + d.transpose()) * 0.5;
    let mut eig: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| a.total_cmp(b));
    eig
}

pub fn min_eigenvalue<R: Dim, C: Dim, S: Storage<f64, R, C>>(m: &Matrix<f64, R, C, S>) -> f64 {
    symmetric_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn max_eigenvalue<R: Dim, C: Dim, S: Storage<f64, R, C>>(m: &Matrix<f64, R, C, S>) -> f64 {
    symmetric_eigenvalues(m).last().copied().unwrap_or(0.0)
}

/// Symmetric to `tol` and no eigenvalue below `-tol`.
pub fn is_psd<R: Dim, C: Dim, S: Storage<f64, R, C>>(m: &Matrix<f64, R, C, S>, tol: f64) -> bool {
    m.nrows() == m.ncols()
        && m.iter().all(|v| v.is_finite())
        && asymmetry(m) <= tol
        && min_eigenvalue(m) >= -tol
}

/// Minimum eigenvalue of `m` after scaling by `diag(scale)^{-1/2}` on both
/// sides. Used to judge PSD order between covariances whose diagonal mixes
/// units.
pub fn scaled_min_eigenvalue(m: &DMatrix<f64>, scale: &[f64]) -> f64 {
    let n = m.nrows();
    let mut s = m.clone();
    for i in 0..n {
        for j in 0..n {
            let denom = (scale[i] * scale[j]).sqrt();
            s[(i, j)] = if denom > 0.0 {
                m[(i, j)] / denom
            } else {
                m[(i, j)]
            };
        }
    }
    min_eigenvalue(&s)
}

/// Solve `A X = B` for symmetric positive-definite `A` via equilibrated
/// Cholesky.
pub fn spd_solve<D, C>(a: &OMatrix<f64, D, D>, b: &OMatrix<f64, D, C>) -> Result<OMatrix<f64, D, C>>
where
    D: Dim,
    C: Dim,
    DefaultAllocator: Allocator<D, D> + Allocator<D, C> + Allocator<D>,
{
    let n = a.nrows();
    if n == 0 {
        return Ok(b.clone());
    }
    let mut scale = Vec::with_capacity(n);
    for i in 0..n {
        let d = a[(i, i)];
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::NumericalFailure(format!(
                "non-positive diagonal entry {d:e} at index {i}"
            )));
        }
        scale.push(1.0 / d.sqrt());
    }
    let mut eq = a.clone();
    for i in 0..n {
        for j in 0..n {
            eq[(i, j)] *= scale[i] * scale[j];
        }
    }
    let eq = symmetrize(&eq);
    let chol = match eq.clone().cholesky() {
        Some(c) => c,
        None => {
            let mut jittered = eq;
            for i in 0..n {
                jittered[(i, i)] += SOLVE_JITTER;
            }
            jittered.cholesky().ok_or_else(|| {
                Error::NumericalFailure("matrix is not positive definite".to_string())
            })?
        }
    };
    let mut rhs = b.clone();
    for i in 0..n {
        for j in 0..rhs.ncols() {
            rhs[(i, j)] *= scale[i];
        }
    }
    let mut x = chol.solve(&rhs);
    for i in 0..n {
        for j in 0..x.ncols() {
            x[(i, j)] *= scale[i];
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite solution".to_string()));
    }
    Ok(x)
}

/// Inverse of a symmetric positive-definite matrix, re-symmetrised.
pub fn spd_inverse<D>(a: &OMatrix<f64, D, D>) -> Result<OMatrix<f64, D, D>>
where
    D: Dim,
    DefaultAllocator: Allocator<D, D> + Allocator<D>,
{
    let (rows, cols) = a.shape_generic();
    let identity = OMatrix::<f64, D, D>::identity_generic(rows, cols);
    spd_solve(a, &identity).map(|inv| symmetrize(&inv))
}

/// A factor `L` with `L Lᵀ = m` for symmetric PSD `m`, which may be singular.
/// Eigen-decomposes the diagonally equilibrated matrix so tiny and large
/// variances are resolved equally well.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let d: Vec<f64> = (0..n).map(|i| m[(i, i)].max(0.0).sqrt()).collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| {
        if d[i] > 0.0 && d[j] > 0.0 {
            m[(i, j)] / (d[i] * d[j])
        } else {
            0.0
        }
    });
    let eig = ((&scaled + scaled.transpose()) * 0.5).symmetric_eigen();
    let mut l = eig.eigenvectors;
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        for i in 0..n {
            l[(i, j)] *= s * d[i];
        }
    }
    l
}

/// Kronecker product `a ⊗ I_block`.
pub fn kron_identity(a: &DMatrix<f64>, block: usize) -> DMatrix<f64> {
    let (r, c) = a.shape();
    let mut out = DMatrix::zeros(r * block, c * block);
    for i in 0..r {
        for j in 0..c {
            let v = a[(i, j)];
            if v != 0.0 {
                for k in 0..block {
                    out[(i * block + k, j * block + k)] = v;
                }
            }
        }
    }
    out
}

/// Block-diagonal assembly of square blocks.
pub fn block_diagonal<R: Dim, C: Dim, S: Storage<f64, R, C>>(
    blocks: &[Matrix<f64, R, C, S>],
) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        for i in 0..b.nrows() {
            for j in 0..b.ncols() {
                out[(r0 + i, c0 + j)] = b[(i, j)];
            }
        }
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}

/// Relative Frobenius distance `‖D(a − b)D‖_F / ‖D b D‖_F` where
/// `D = diag(b)^{-1/2}`. Compares covariances whose entries mix units.
pub fn normalized_frobenius_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = b.nrows();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = b[(i, i)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        for j in 0..n {
            let s = scale[i] * scale[j];
            num += ((a[(i, j)] - b[(i, j)]) * s).powi(2);
            den += (b[(i, j)] * s).powi(2);
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

pub type DynRows5 = OMatrix<f64, Dyn, nalgebra::U5>;
