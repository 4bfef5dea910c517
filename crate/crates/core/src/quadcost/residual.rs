use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::belief::GaussianBelief;
use super::layout::{VariableKey, VariableLayout};
use super::linalg;
use crate::error::{Error, Result};

/// A residual `r(x)` of a sub-state together with its analytic Jacobian.
///
/// `x` is the concatenation of the blocks referenced by the owning term, in
/// the term's key order.
pub trait ResidualModel: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn residual(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// Affine residual `A x − b`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        assert_eq!(a.nrows(), b.len(), "A and b disagree on residual dimension");
        Self { a, b }
    }

    /// `x − μ`.
    pub fn anchor(mu: DVector<f64>) -> Self {
        let n = mu.len();
        Self { a: DMatrix::identity(n, n), b: mu }
    }
}

impl ResidualModel for LinearModel {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x - &self.b
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }
}

type ResidualFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type JacobianFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Residual model assembled from closures.
#[derive(Clone)]
pub struct FnModel {
    name: &'static str,
    dim: usize,
    residual: Arc<ResidualFn>,
    jacobian: Arc<JacobianFn>,
}

impl FnModel {
    pub fn new(
        name: &'static str,
        dim: usize,
        residual: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        jacobian: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { name, dim, residual: Arc::new(residual), jacobian: Arc::new(jacobian) }
    }
}

impl fmt::Debug for FnModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnModel").field("name", &self.name).field("dim", &self.dim).finish()
    }
}

impl ResidualModel for FnModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.residual)(x)
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.jacobian)(x)
    }
}

/// One squared-Mahalanobis cost `‖r(x_keys)‖²_{Σ⁻¹}`, stored with the
/// whitening matrix `W` (`WᵀW = Σ⁻¹`).
#[derive(Debug, Clone)]
pub struct ResidualTerm {
    keys: Vec<VariableKey>,
    model: Arc<dyn ResidualModel>,
    sqrt_info: DMatrix<f64>,
}

impl ResidualTerm {
    /// Noise covariance must be symmetric positive definite; it is whitened
    /// with its symmetric inverse square root.
    pub fn new(keys: Vec<VariableKey>, model: Arc<dyn ResidualModel>, noise: &DMatrix<f64>) -> Result<Self> {
        if noise.nrows() != model.dim() || noise.ncols() != model.dim() {
            return Err(Error::layout(format!(
                "noise covariance is {}x{} for a residual of dimension {}",
                noise.nrows(),
                noise.ncols(),
                model.dim()
            )));
        }
        let sqrt_info = linalg::spd_inv_sqrt(noise)?;
        Ok(Self { keys, model, sqrt_info })
    }

    pub fn with_sqrt_info(keys: Vec<VariableKey>, model: Arc<dyn ResidualModel>, sqrt_info: DMatrix<f64>) -> Result<Self> {
        if sqrt_info.ncols() != model.dim() {
            return Err(Error::layout("whitening matrix does not match residual dimension"));
        }
        Ok(Self { keys, model, sqrt_info })
    }

    /// `‖x − μ‖²_{Σ⁻¹}` over the whole belief; a singular covariance gives
    /// zero weight to its null directions.
    pub fn prior(belief: &GaussianBelief) -> Result<Self> {
        let keys: Vec<_> = belief.layout().keys().collect();
        let model = Arc::new(LinearModel::anchor(belief.mean().clone()));
        let sqrt_info = linalg::prior_whitener(belief.covariance())?;
        Ok(Self { keys, model, sqrt_info })
    }

    pub fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    pub fn model(&self) -> &Arc<dyn ResidualModel> {
        &self.model
    }

    pub fn sqrt_info(&self) -> &DMatrix<f64> {
        &self.sqrt_info
    }

    /// Whitened residual dimension.
    pub fn dim(&self) -> usize {
        self.sqrt_info.nrows()
    }

    /// Flat indices of the referenced blocks within `layout`.
    pub fn columns(&self, layout: &VariableLayout) -> Result<Vec<usize>> {
        layout.indices_of(&self.keys)
    }

    /// Whitened residual and Jacobian at the sub-state gathered from `point`.
    pub fn linearize(&self, layout: &VariableLayout, point: &DVector<f64>) -> Result<(Vec<usize>, DVector<f64>, DMatrix<f64>)> {
        let cols = self.columns(layout)?;
        let x = linalg::select_entries(point, &cols);
        let r = self.model.residual(&x);
        let j = self.model.jacobian(&x);
        if r.len() != self.model.dim() || j.shape() != (self.model.dim(), cols.len()) {
            return Err(Error::layout(format!(
                "residual model returned {} rows and a {}x{} Jacobian for {} inputs",
                r.len(),
                j.nrows(),
                j.ncols(),
                cols.len()
            )));
        }
        if !r.iter().chain(j.iter()).all(|v| v.is_finite()) {
            return Err(Error::numeric("non-finite residual or Jacobian"));
        }
        Ok((cols, &self.sqrt_info * r, &self.sqrt_info * j))
    }

    /// `‖r(x)‖²_{Σ⁻¹}` at `point`.
    pub fn cost(&self, layout: &VariableLayout, point: &DVector<f64>) -> Result<f64> {
        let cols = self.columns(layout)?;
        let r = self.model.residual(&linalg::select_entries(point, &cols));
        Ok((&self.sqrt_info * r).norm_squared())
    }
}
