use nalgebra::{DMatrix, DVector, DVectorView};

use super::layout::{VariableKey, VariableLayout};
use super::linalg::{self, select_block, select_entries};
use crate::error::{Error, Result};

/// Gaussian over a flat state described by a [`VariableLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    layout: VariableLayout,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianBelief {
    /// Checks shapes and finiteness only; see [`check_invariants`](Self::check_invariants).
    pub fn new(layout: VariableLayout, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = layout.dim();
        if mean.len() != d || covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::layout(format!(
                "belief of dimension {d} given mean {} and covariance {}x{}",
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if !mean.iter().all(|v| v.is_finite()) || !linalg::all_finite(&covariance) {
            return Err(Error::numeric("non-finite belief"));
        }
        Ok(Self { layout, mean, covariance })
    }

    /// Like [`new`](Self::new), additionally requiring a symmetric PSD covariance.
    pub fn checked(layout: VariableLayout, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let b = Self::new(layout, mean, covariance)?;
        b.check_invariants()?;
        Ok(b)
    }

    pub fn empty() -> Self {
        Self { layout: VariableLayout::new(), mean: DVector::zeros(0), covariance: DMatrix::zeros(0, 0) }
    }

    pub fn layout(&self) -> &VariableLayout {
        &self.layout
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn mean_mut(&mut self) -> &mut DVector<f64> {
        &mut self.mean
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn into_parts(self) -> (VariableLayout, DVector<f64>, DMatrix<f64>) {
        (self.layout, self.mean, self.covariance)
    }

    pub fn check_invariants(&self) -> Result<()> {
        if linalg::covariance_is_healthy(&self.covariance) {
            return Ok(());
        }
        let h = linalg::covariance_health(&self.covariance);
        Err(Error::numeric(format!(
            "covariance violates invariants: asymmetry {:.3e}, min eigenvalue ratio {:.3e}",
            h.asymmetry, h.min_eig_ratio
        )))
    }

    pub fn block_mean(&self, key: &VariableKey) -> Result<DVectorView<'_, f64>> {
        let r = self.layout.require(key)?;
        Ok(self.mean.rows(r.start, r.len()))
    }

    pub fn cov_block(&self, row: &VariableKey, col: &VariableKey) -> Result<DMatrix<f64>> {
        let r = self.layout.require(row)?;
        let c = self.layout.require(col)?;
        Ok(self.covariance.view((r.start, c.start), (r.len(), c.len())).into_owned())
    }

    /// Squared Mahalanobis distance of `point` (same layout) from the mean.
    pub fn mahalanobis(&self, point: &DVector<f64>) -> Result<f64> {
        if point.len() != self.dim() {
            return Err(Error::layout("point dimension does not match belief"));
        }
        let diff = point - &self.mean;
        let sol = linalg::spd_solve(&self.covariance, &DMatrix::from_column_slice(diff.len(), 1, diff.as_slice()))?;
        Ok(diff.dot(&sol.column(0)))
    }

    /// Marginal over `keys`, in the order given.
    pub fn marginal(&self, keys: &[VariableKey]) -> Result<GaussianBelief> {
        let idx = self.layout.indices_of(keys)?;
        let layout = VariableLayout::from_blocks(
            keys.iter().map(|k| (*k, self.layout.block(k).expect("checked above").dim)),
        )?;
        Ok(GaussianBelief {
            layout,
            mean: select_entries(&self.mean, &idx),
            covariance: select_block(&self.covariance, &idx, &idx),
        })
    }

    /// Delete `keys` from the state (rows and columns removed).
    ///
    /// For a Gaussian in covariance form this is the exact marginal of the
    /// remaining variables.
    pub fn drop_keys(&self, keys: &[VariableKey]) -> Result<GaussianBelief> {
        for k in keys {
            self.layout.require(k)?;
        }
        let kept: Vec<VariableKey> = self.layout.keys().filter(|k| !keys.contains(k)).collect();
        self.marginal(&kept)
    }

    /// Same belief with blocks permuted into `new_layout`.
    pub fn reorder(&self, new_layout: &VariableLayout) -> Result<GaussianBelief> {
        let idx = new_layout.gather_from(&self.layout)?;
        Ok(GaussianBelief {
            layout: new_layout.clone(),
            mean: select_entries(&self.mean, &idx),
            covariance: select_block(&self.covariance, &idx, &idx),
        })
    }

    pub fn to_canonical(&self) -> GaussianBelief {
        if self.layout.is_canonical() {
            return self.clone();
        }
        self.reorder(&self.layout.canonical()).expect("canonical layout is a permutation")
    }

    /// Append new blocks at the end of the layout. `cross` is the covariance
    /// between the existing state (rows) and the new blocks (columns).
    pub fn augment(
        &self,
        new_blocks: &[(VariableKey, usize)],
        mean: &DVector<f64>,
        cross: &DMatrix<f64>,
        corner: &DMatrix<f64>,
    ) -> Result<GaussianBelief> {
        let d = self.dim();
        let n: usize = new_blocks.iter().map(|(_, dim)| dim).sum();
        if mean.len() != n || cross.shape() != (d, n) || corner.shape() != (n, n) {
            return Err(Error::layout("augmentation blocks have inconsistent shapes"));
        }
        let mut layout = self.layout.clone();
        for (k, dim) in new_blocks {
            layout.push(*k, *dim)?;
        }
        let mut m = Vec::with_capacity(d + n);
        m.extend_from_slice(self.mean.as_slice());
        m.extend_from_slice(mean.as_slice());
        let mut c = Vec::with_capacity((d + n) * (d + n));
        for j in 0..d {
            c.extend_from_slice(self.covariance.column(j).as_slice());
            c.extend(cross.row(j).iter());
        }
        for j in 0..n {
            c.extend_from_slice(cross.column(j).as_slice());
            c.extend_from_slice(corner.column(j).as_slice());
        }
        let (m, c) = (DVector::from_vec(m), DMatrix::from_vec(d + n, d + n, c));
        GaussianBelief::new(layout, m, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadcost::layout::VariableKey::Generic;

    fn two_by_two() -> GaussianBelief {
        let layout = VariableLayout::from_blocks([(Generic(0), 1), (Generic(1), 1)]).unwrap();
        GaussianBelief::new(
            layout,
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]),
        )
        .unwrap()
    }

    #[test]
    fn swap_two_blocks() {
        let b = two_by_two();
        let swapped = VariableLayout::from_blocks([(Generic(1), 1), (Generic(0), 1)]).unwrap();
        let r = b.reorder(&swapped).unwrap();
        assert_eq!(r.covariance(), &DMatrix::from_row_slice(2, 2, &[5.0, 2.0, 2.0, 1.0]));
        assert_eq!(r.mean().as_slice(), &[2.0, 1.0]);
        assert_eq!(r.reorder(b.layout()).unwrap(), b);
    }

    #[test]
    fn reorder_rejects_foreign_layout() {
        let b = two_by_two();
        let other = VariableLayout::from_blocks([(Generic(1), 1), (Generic(2), 1)]).unwrap();
        assert!(matches!(b.reorder(&other), Err(Error::Layout(_))));
    }

    #[test]
    fn rejects_bad_shapes_and_asymmetry() {
        let layout = VariableLayout::from_blocks([(Generic(0), 2)]).unwrap();
        assert!(GaussianBelief::new(layout.clone(), DVector::zeros(3), DMatrix::identity(2, 2)).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(GaussianBelief::checked(layout, DVector::zeros(2), asym).is_err());
    }

    #[test]
    fn drop_keeps_remaining_marginal() {
        let b = two_by_two();
        let d = b.drop_keys(&[Generic(0)]).unwrap();
        assert_eq!(d.dim(), 1);
        assert_eq!(d.covariance()[(0, 0)], 5.0);
        assert_eq!(d.mean()[0], 2.0);
    }
}
