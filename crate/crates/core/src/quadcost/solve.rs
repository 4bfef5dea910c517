use nalgebra::{DMatrix, DVector};

use super::belief::GaussianBelief;
use super::layout::{VariableKey, VariableLayout};
use super::linalg::{self, select_block, select_entries};
use super::residual::ResidualTerm;
use crate::error::{Error, Result};

/// How a Gauss-Newton step treats a rank-deficient normal matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolveMode {
    /// Cholesky with one jitter retry, then [`Error::Singular`].
    #[default]
    Strict,
    /// Eigen-based pseudo-inverse with a relative cutoff of [`linalg::PINV_RTOL`].
    Pseudo,
}

/// Whitened residuals `C` and Jacobian `J` of a sum of terms, stacked in term order.
pub fn stack_residuals(
    terms: &[ResidualTerm],
    layout: &VariableLayout,
    point: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_point(layout, point)?;
    let rows: usize = terms.iter().map(ResidualTerm::dim).sum();
    let mut c = DVector::zeros(rows);
    let mut j = DMatrix::zeros(rows, layout.dim());
    let mut row = 0;
    for term in terms {
        let (cols, r, jt) = term.linearize(layout, point)?;
        c.rows_mut(row, r.len()).copy_from(&r);
        for (local, &col) in cols.iter().enumerate() {
            for i in 0..r.len() {
                j[(row + i, col)] = jt[(i, local)];
            }
        }
        row += r.len();
    }
    Ok((c, j))
}

/// `JᵀJ`, `JᵀC` and `‖C‖²`, accumulated term by term without forming `J`.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub information: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub cost: f64,
}

pub fn normal_equations(
    terms: &[ResidualTerm],
    layout: &VariableLayout,
    point: &DVector<f64>,
) -> Result<NormalEquations> {
    check_point(layout, point)?;
    let d = layout.dim();
    let mut information = DMatrix::zeros(d, d);
    let mut gradient = DVector::zeros(d);
    let mut cost = 0.0;
    for term in terms {
        let (cols, r, jt) = term.linearize(layout, point)?;
        let jtj = jt.tr_mul(&jt);
        let jtr = jt.tr_mul(&r);
        for (a, &ca) in cols.iter().enumerate() {
            gradient[ca] += jtr[a];
            for (b, &cb) in cols.iter().enumerate() {
                information[(ca, cb)] += jtj[(a, b)];
            }
        }
        cost += r.norm_squared();
    }
    Ok(NormalEquations { information, gradient, cost })
}

/// One Gauss-Newton step about `lin_point`:
/// `Σ = (JᵀJ)†`, `μ = x⋆ − Σ JᵀC(x⋆)`.
pub fn gauss_newton_step(
    terms: &[ResidualTerm],
    layout: &VariableLayout,
    lin_point: &DVector<f64>,
    mode: SolveMode,
) -> Result<GaussianBelief> {
    let ne = normal_equations(terms, layout, lin_point)?;
    let mut cov = match mode {
        SolveMode::Strict => linalg::spd_inverse(&ne.information)?,
        SolveMode::Pseudo => linalg::symmetric_pinv(&ne.information),
    };
    linalg::symmetrize(&mut cov);
    let mean = lin_point - &cov * &ne.gradient;
    GaussianBelief::new(layout.clone(), mean, cov)
}

/// Linearize about `lin_point` and eliminate `marg_keys` by Schur complement.
///
/// Equivalent to `Σ = (J_Kᵀ[I − J_M(J_MᵀJ_M)⁻¹J_Mᵀ]J_K)⁻¹` and
/// `μ = x⋆_K − Σ J_Kᵀ[I − J_M(J_MᵀJ_M)⁻¹J_Mᵀ] C(x⋆)`, evaluated on the
/// normal-matrix blocks. The result is laid out in `keep_keys` order.
pub fn marginalize(
    terms: &[ResidualTerm],
    layout: &VariableLayout,
    keep_keys: &[VariableKey],
    marg_keys: &[VariableKey],
    lin_point: &DVector<f64>,
) -> Result<GaussianBelief> {
    if keep_keys.is_empty() {
        return Err(Error::layout("marginalization must keep at least one variable"));
    }
    check_partition(layout, keep_keys, marg_keys)?;
    let ne = normal_equations(terms, layout, lin_point)?;
    let k = layout.indices_of(keep_keys)?;
    let m = layout.indices_of(marg_keys)?;

    let l_kk = select_block(&ne.information, &k, &k);
    let g_k = select_entries(&ne.gradient, &k);
    let (schur, g_red) = if m.is_empty() {
        (l_kk, g_k)
    } else {
        let l_km = select_block(&ne.information, &k, &m);
        let l_mm = select_block(&ne.information, &m, &m);
        let g_m = select_entries(&ne.gradient, &m);
        let chol = linalg::spd_factor(&l_mm).map_err(|e| {
            Error::Marginalization(format!("marginalized block is not invertible: {e}"))
        })?;
        // X = Λ_MM⁻¹ [Λ_MK | g_M]
        let mut rhs = DMatrix::zeros(m.len(), k.len() + 1);
        rhs.view_mut((0, 0), (m.len(), k.len())).copy_from(&l_km.transpose());
        rhs.column_mut(k.len()).copy_from(&g_m);
        let x = chol.solve(&rhs);
        let schur = l_kk - &l_km * x.columns(0, k.len());
        let g_red = g_k - &l_km * x.column(k.len());
        (schur, g_red)
    };
    let mut cov = linalg::spd_inverse(&schur)?;
    linalg::symmetrize(&mut cov);
    let mean = select_entries(lin_point, &k) - &cov * g_red;
    let out_layout = VariableLayout::from_blocks(
        keep_keys.iter().map(|key| (*key, layout.block(key).expect("checked").dim)),
    )?;
    GaussianBelief::new(out_layout, mean, cov)
}

/// Permute a belief into `new_layout`.
pub fn reorder(belief: &GaussianBelief, new_layout: &VariableLayout) -> Result<GaussianBelief> {
    belief.reorder(new_layout)
}

fn check_point(layout: &VariableLayout, point: &DVector<f64>) -> Result<()> {
    if point.len() != layout.dim() {
        return Err(Error::layout(format!(
            "linearization point has length {} for a layout of dimension {}",
            point.len(),
            layout.dim()
        )));
    }
    if !point.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite linearization point"));
    }
    Ok(())
}

fn check_partition(layout: &VariableLayout, keep: &[VariableKey], marg: &[VariableKey]) -> Result<()> {
    for key in keep.iter().chain(marg) {
        layout.require(key)?;
    }
    let mut all: Vec<_> = keep.iter().chain(marg).copied().collect();
    all.sort_unstable();
    all.dedup();
    if all.len() != keep.len() + marg.len() || all.len() != layout.len() {
        return Err(Error::layout("keep and marginalized keys must partition the layout"));
    }
    Ok(())
}
