//! Dense symmetric-matrix helpers shared by the solvers and both filter forms.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Singular values (or eigenvalues) below this fraction of the largest are
/// treated as zero by pseudo-inverses.
pub const PINV_RTOL: f64 = 1e-10;

/// Relative Frobenius asymmetry tolerated in a covariance.
pub const SYMMETRY_RTOL: f64 = 1e-9;

/// Smallest eigenvalue tolerated in a covariance, relative to the largest.
pub const PSD_RTOL: f64 = 1e-9;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    let s = m.as_mut_slice();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (s[j * n + i] + s[i * n + j]);
            s[j * n + i] = v;
            s[i * n + j] = v;
        }
    }
}

/// `m −= a aᵀ` for symmetric `m`: only the lower block triangle is
/// multiplied, then mirrored, so the result is exactly symmetric.
pub fn sub_gram(m: &mut DMatrix<f64>, a: &DMatrix<f64>) {
    const BLOCK: usize = 32;
    let n = m.nrows();
    debug_assert_eq!(a.nrows(), n);
    for i0 in (0..n).step_by(BLOCK) {
        let bi = BLOCK.min(n - i0);
        let ai = a.rows(i0, bi);
        for j0 in (0..=i0).step_by(BLOCK) {
            let bj = BLOCK.min(n - j0);
            let aj_t = a.rows(j0, bj).transpose();
            m.view_mut((i0, j0), (bi, bj)).gemm(-1.0, &ai, &aj_t, 1.0);
        }
    }
    let s = m.as_mut_slice();
    for j in 0..n {
        for i in (j + 1)..n {
            s[i * n + j] = s[j * n + i];
        }
    }
}

/// Inverse of a lower-triangular matrix with nonzero diagonal.
///
/// Column-oriented forward substitution on contiguous column slices; much
/// faster than a generic triangular solve against the identity.
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    if (0..n).any(|i| l[(i, i)] == 0.0 || !l[(i, i)].is_finite()) {
        return Err(Error::numeric("singular triangular factor"));
    }
    let ls = l.as_slice();
    let mut x = DMatrix::zeros(n, n);
    let xs = x.as_mut_slice();
    for j in 0..n {
        let col = &mut xs[j * n..(j + 1) * n];
        col[j] = 1.0;
        for k in j..n {
            let v = col[k] / ls[k * n + k];
            col[k] = v;
            if v != 0.0 {
                let lk = &ls[k * n + k + 1..(k + 1) * n];
                for (c, a) in col[k + 1..].iter_mut().zip(lk) {
                    *c -= v * a;
                }
            }
        }
    }
    Ok(x)
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    // `v * 0` is NaN exactly for non-finite `v`; the sum vectorizes.
    m.as_slice().iter().fold(0.0, |acc, v| acc + v * 0.0) == 0.0
}

/// ‖a − b‖_F / max(‖a‖_F, ‖b‖_F); zero when both are zero.
pub fn relative_deviation<R, C, S1, S2>(
    a: &nalgebra::Matrix<f64, R, C, S1>,
    b: &nalgebra::Matrix<f64, R, C, S2>,
) -> f64
where
    R: nalgebra::Dim,
    C: nalgebra::Dim,
    S1: nalgebra::storage::Storage<f64, R, C>,
    S2: nalgebra::storage::Storage<f64, R, C>,
{
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        return 0.0;
    }
    let mut diff = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        diff += (x - y) * (x - y);
    }
    diff.sqrt() / scale
}

/// Inverse of a symmetric positive-definite matrix.
///
/// A failed Cholesky gets one retry with a diagonal jitter of
/// `1e-12 · trace / n`; a second failure reports the numerical rank.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = spd_factor(m)?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn spd_factor(m: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let n = m.nrows();
    if !all_finite(m) {
        return Err(Error::numeric("non-finite entry in normal matrix"));
    }
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    // The jitter is meant for rounding-level indefiniteness; a matrix that is
    // numerically rank deficient is reported rather than regularized.
    let rank = numerical_rank(m);
    if rank < n {
        return Err(Error::Singular { rank, dim: n });
    }
    let jitter = 1e-12 * m.trace() / n.max(1) as f64;
    if jitter > 0.0 {
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(chol);
        }
    }
    Err(Error::Singular { rank: numerical_rank(m), dim: n })
}

/// Solve `m x = rhs` for SPD `m` (same jitter policy as [`spd_inverse`]).
pub fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(spd_factor(m)?.solve(rhs))
}

pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if max == 0.0 {
        return 0;
    }
    eig.eigenvalues.iter().filter(|v| v.abs() > PINV_RTOL * max).count()
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix.
pub fn symmetric_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let inv = eig.eigenvalues.map(|v| if max > 0.0 && v.abs() > PINV_RTOL * max { 1.0 / v } else { 0.0 });
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// Symmetric inverse square root of an SPD matrix.
pub fn spd_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !all_finite(m) {
        return Err(Error::numeric("non-finite covariance"));
    }
    if relative_deviation(m, &m.transpose()) > SYMMETRY_RTOL {
        return Err(Error::numeric("covariance is not symmetric"));
    }
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.max();
    if max.is_nan() || max <= 0.0 || eig.eigenvalues.min() <= PINV_RTOL * max {
        return Err(Error::numeric("covariance is not positive definite"));
    }
    let d = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Symmetric square root of a PSD matrix (negative rounding noise clipped).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Whitening for a (possibly large) Gaussian prior: returns `W` with
/// `WᵀW = Σ⁻¹`.
///
/// Uses the inverse Cholesky factor; a covariance that is only positive
/// semidefinite falls back to the symmetric pseudo-inverse square root,
/// which gives zero weight to its null directions.
pub fn prior_whitener(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !all_finite(cov) {
        return Err(Error::numeric("non-finite prior covariance"));
    }
    if let Some(chol) = Cholesky::new(cov.clone()) {
        let n = cov.nrows();
        debug_assert_eq!(chol.l().nrows(), n);
        return lower_triangular_inverse(&chol.l());
    }
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.min() < -PSD_RTOL * max {
        return Err(Error::numeric("prior covariance is not positive semidefinite"));
    }
    let d = eig.eigenvalues.map(|v| if max > 0.0 && v > PINV_RTOL * max { 1.0 / v.sqrt() } else { 0.0 });
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Relative asymmetry and smallest eigenvalue relative to the largest.
#[derive(Debug, Clone, Copy)]
pub struct CovarianceHealth {
    pub asymmetry: f64,
    pub min_eig_ratio: f64,
}

impl CovarianceHealth {
    pub fn is_ok(&self) -> bool {
        self.asymmetry <= SYMMETRY_RTOL && self.min_eig_ratio >= -PSD_RTOL
    }
}

pub fn covariance_health(cov: &DMatrix<f64>) -> CovarianceHealth {
    let asymmetry = relative_deviation(cov, &cov.transpose());
    let mut sym = cov.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let max = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min_eig_ratio = if max == 0.0 { 0.0 } else { eig.min() / max };
    CovarianceHealth { asymmetry, min_eig_ratio }
}

/// Cheap sufficient check of the covariance invariants.
///
/// Cholesky of `Σ + 1e-9 · max_diag · I` succeeding proves the smallest
/// eigenvalue is at least `−1e-9 · λ_max`; only on failure is the full
/// eigen-decomposition computed.
pub fn covariance_is_healthy(cov: &DMatrix<f64>) -> bool {
    if !all_finite(cov) || relative_deviation(cov, &cov.transpose()) > SYMMETRY_RTOL {
        return false;
    }
    let n = cov.nrows();
    let max_diag = (0..n).map(|i| cov[(i, i)]).fold(0.0f64, f64::max);
    let mut shifted = cov.clone();
    for i in 0..n {
        shifted[(i, i)] += PSD_RTOL * max_diag;
    }
    if Cholesky::new(shifted).is_some() {
        return true;
    }
    covariance_health(cov).is_ok()
}

pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn select_cols(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

pub fn select_block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    // Runs of consecutive row indices are copied as contiguous slices.
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &r in rows {
        match runs.last_mut() {
            Some((start, len)) if *start + *len == r => *len += 1,
            _ => runs.push((r, 1)),
        }
    }
    let n = m.nrows();
    let src = m.as_slice();
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &c in cols {
        let col = &src[c * n..(c + 1) * n];
        for &(start, len) in &runs {
            out.extend_from_slice(&col[start..start + len]);
        }
    }
    DMatrix::from_vec(rows.len(), cols.len(), out)
}

pub fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

pub fn block_diagonal(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_gram_matches_dense_product() {
        let a = DMatrix::from_fn(70, 9, |i, j| ((i * 7 + j * 13) % 11) as f64 - 5.0);
        let base = DMatrix::from_fn(70, 70, |i, j| if i == j { 1000.0 } else { 1.0 / (1 + i + j) as f64 });
        let mut m = base.clone();
        sub_gram(&mut m, &a);
        let want = &base - &a * a.transpose();
        assert!((&m - &want).amax() < 1e-9);
        assert_eq!(m, m.transpose());
    }

    #[test]
    fn select_block_matches_indexing() {
        let m = DMatrix::from_fn(7, 7, |i, j| (10 * i + j) as f64);
        let rows = [4, 5, 6, 0, 2, 3, 1];
        let cols = [6, 0, 1];
        let b = select_block(&m, &rows, &cols);
        assert_eq!(b, DMatrix::from_fn(7, 3, |i, j| m[(rows[i], cols[j])]));
        assert_eq!(select_block(&m, &[], &cols).shape(), (0, 3));
    }

    #[test]
    fn jitter_rescues_borderline_matrix_but_not_rank_loss() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        match spd_inverse(&m) {
            Err(Error::Singular { rank, dim }) => assert_eq!((rank, dim), (1, 2)),
            other => panic!("expected singular error, got {other:?}"),
        }
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let inv = spd_inverse(&m).unwrap();
        assert!(relative_deviation(&(&m * &inv), &DMatrix::identity(2, 2)) < 1e-14);
    }

    #[test]
    fn inv_sqrt_squares_to_inverse() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let w = spd_inv_sqrt(&m).unwrap();
        assert!(relative_deviation(&(&w * &m * &w), &DMatrix::identity(3, 3)) < 1e-13);
        let p = prior_whitener(&m).unwrap();
        assert!(relative_deviation(&(p.transpose() * &p), &spd_inverse(&m).unwrap()) < 1e-13);
    }

    #[test]
    fn inv_sqrt_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(spd_inv_sqrt(&m), Err(Error::Numeric(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(spd_inv_sqrt(&asym), Err(Error::Numeric(_))));
    }

    #[test]
    fn health_check_flags_negative_eigenvalue() {
        let good = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!(covariance_is_healthy(&good));
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(!covariance_is_healthy(&bad));
        assert!(!covariance_health(&bad).is_ok());
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(covariance_is_healthy(&singular));
    }
}
