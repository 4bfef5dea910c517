//! Covariance-form dynamic EKF SLAM: one Gaussian over the full state,
//! updated block by block.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3};

use crate::backend::{wrap_headings, FilterConfig, PoseAugmentMode, SlamBackend};
use crate::error::{Error, Result};
use crate::frame::{self, FrameData, FramePlan};
use crate::models::{self, FeaturePosition, Pose2};
use crate::quadcost::linalg::{self, symmetrize};
use crate::quadcost::{Epoch, GaussianBelief, VariableKey, VariableLayout, POSE_DIM};

/// `(column, block)` pairs of one constraint row group.
type BlockList = Vec<(usize, DMatrix<f64>)>;

/// A linear map from the flat state, stored as dense blocks on column ranges:
/// row block `r` gets `B · x[c..c + B.ncols()]` for each `(r, c, B)`.
#[derive(Debug, Clone, Default)]
struct BlockRows {
    rows: usize,
    blocks: Vec<(usize, usize, DMatrix<f64>)>,
}

impl BlockRows {
    fn new(rows: usize) -> Self {
        Self { rows, blocks: Vec::new() }
    }

    fn push(&mut self, row: usize, col: usize, block: DMatrix<f64>) {
        debug_assert!(row + block.nrows() <= self.rows);
        self.blocks.push((row, col, block));
    }

    /// `M Hᵀ` for a `k × d` matrix `M` (for symmetric `M = Σ`, this is `Σ Hᵀ`).
    fn cov_times_transpose(&self, cov: &DMatrix<f64>) -> DMatrix<f64> {
        // Blocks are a few rows wide, so column axpys beat small GEMM calls.
        let k = cov.nrows();
        let src = cov.as_slice();
        let mut out = DMatrix::zeros(k, self.rows);
        let dst = out.as_mut_slice();
        for (r, c, b) in &self.blocks {
            for i in 0..b.nrows() {
                let out_col = &mut dst[(r + i) * k..(r + i + 1) * k];
                for j in 0..b.ncols() {
                    let w = b[(i, j)];
                    if w != 0.0 {
                        let in_col = &src[(c + j) * k..(c + j + 1) * k];
                        for (o, v) in out_col.iter_mut().zip(in_col) {
                            *o += w * v;
                        }
                    }
                }
            }
        }
        out
    }

    /// `H M` for a `d × k` matrix `M`, through the contiguous-column kernel.
    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.cov_times_transpose(&m.transpose()).transpose()
    }
}

/// Covariance-form filter state.
#[derive(Debug, Clone)]
pub struct FilterState {
    config: FilterConfig,
    belief: GaussianBelief,
    time: u32,
}

impl FilterState {
    /// A state holding only the ego pose.
    pub fn init(config: FilterConfig, prior_mean: Pose2, prior_cov: &DMatrix<f64>) -> Result<Self> {
        if prior_cov.shape() != (POSE_DIM, POSE_DIM) {
            return Err(Error::layout("ego prior covariance must be 3x3"));
        }
        linalg::spd_inv_sqrt(prior_cov)?;
        let layout = VariableLayout::from_keys([VariableKey::EgoPose])?;
        let mean = DVector::from_column_slice(prior_mean.to_vector().as_slice());
        let belief = GaussianBelief::checked(layout, mean, prior_cov.clone())?;
        Ok(Self { config, belief, time: 0 })
    }

    /// Wrap an existing belief (reordered to canonical layout).
    pub fn from_belief(config: FilterConfig, belief: GaussianBelief, time: u32) -> Result<Self> {
        if !belief.layout().contains(&VariableKey::EgoPose) {
            return Err(Error::State("belief has no ego pose".into()));
        }
        Ok(Self { config, belief: belief.to_canonical(), time })
    }

    pub fn belief(&self) -> &GaussianBelief {
        &self.belief
    }

    pub fn time(&self) -> u32 {
        self.time
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn n_static(&self) -> usize {
        self.belief.layout().static_features().len()
    }

    pub fn n_objects(&self) -> usize {
        self.belief.layout().objects().len()
    }

    pub fn n_object_features(&self, object: usize) -> usize {
        self.belief.layout().object_features(object, Epoch::Reference).len()
    }

    fn ego(&self) -> Result<Pose2> {
        let m = self.belief.block_mean(&VariableKey::EgoPose)?;
        Ok(Pose2 { x: m[0], y: m[1], theta: m[2] })
    }

    fn point(&self, key: &VariableKey) -> Result<FeaturePosition> {
        let m = self.belief.block_mean(key)?;
        Ok(Vector2::new(m[0], m[1]))
    }

    fn commit(&mut self, belief: GaussianBelief) {
        let mut belief = if belief.layout().is_canonical() { belief } else { belief.to_canonical() };
        wrap_headings(&mut belief);
        self.belief = belief;
    }

    /// Append `new = M x + q` blocks, `q ~ N(0, Q)`, with mean `mean`.
    fn augment_linear(
        &self,
        keys: &[(VariableKey, usize)],
        mean: DVector<f64>,
        map: &BlockRows,
        noise: &DMatrix<f64>,
    ) -> Result<GaussianBelief> {
        let cross = map.cov_times_transpose(self.belief.covariance());
        let mut corner = map.apply(&cross) + noise;
        symmetrize(&mut corner);
        self.belief.augment(keys, &mean, &cross, &corner)
    }

    /// Kalman update with measurement model `y = H x + e`, `e ~ N(0, R)`,
    /// given the innovation `ν = y − H μ`.
    fn kalman(belief: &GaussianBelief, h: &BlockRows, innovation: &DVector<f64>, noise: &DMatrix<f64>) -> Result<GaussianBelief> {
        // P = Σ Hᵀ; S = H P + R.
        let p = h.cov_times_transpose(belief.covariance());
        let mut s = h.apply(&p) + noise;
        symmetrize(&mut s);
        let chol = linalg::spd_factor(&s)?;
        // With S = L Lᵀ and Kᵀ = P L⁻ᵀ: μ += Kᵀ L⁻¹ ν, Σ −= Kᵀ K.
        let l_inv = linalg::lower_triangular_inverse(&chol.l())?;
        let kt = &p * l_inv.transpose();
        let mean = belief.mean() + &kt * (&l_inv * innovation);
        let mut cov = belief.covariance().clone();
        linalg::sub_gram(&mut cov, &kt);
        GaussianBelief::new(belief.layout().clone(), mean, cov)
    }

    /// New features from body-frame measurements, initialized at `ℓ(μ_x, z)`.
    pub fn feature_augment(&mut self, features: &[(VariableKey, Vector2<f64>)]) -> Result<()> {
        if features.is_empty() {
            return Ok(());
        }
        let layout = self.belief.layout();
        let ego_col = layout.require(&VariableKey::EgoPose)?.start;
        let x = self.ego()?;
        let sigma_v = to_dmatrix2(&self.config.noise.measurement);
        let n = features.len();
        let mut map = BlockRows::new(2 * n);
        let mut mean = DVector::zeros(2 * n);
        let mut noise = DMatrix::zeros(2 * n, 2 * n);
        let mut keys = Vec::with_capacity(n);
        for (i, (key, z)) in features.iter().enumerate() {
            if !matches!(key, VariableKey::StaticFeature(_) | VariableKey::ObjectFeature { .. }) {
                return Err(Error::layout(format!("{key} is not a feature")));
            }
            if layout.contains(key) {
                return Err(Error::layout(format!("{key} is already in the state")));
            }
            let (lx, lz) = models::inverse_measure_jacobians(&x, z);
            mean.rows_mut(2 * i, 2).copy_from(&models::inverse_measure(&x, z));
            map.push(2 * i, ego_col, DMatrix::from_column_slice(2, 3, lx.as_slice()));
            let lz = to_dmatrix2(&lz);
            noise.view_mut((2 * i, 2 * i), (2, 2)).copy_from(&(&lz * &sigma_v * lz.transpose()));
            keys.push((*key, 2));
        }
        let belief = self.augment_linear(&keys, mean, &map, &noise)?;
        self.commit(belief);
        Ok(())
    }

    /// Add `ξ_{t,α}` for every object whose reference and current clouds overlap.
    pub fn object_pose_augment(&mut self) -> Result<()> {
        let layout = self.belief.layout().clone();
        let targets = frame::pose_augmentation_targets(&layout);
        if targets.is_empty() {
            return Ok(());
        }
        let (w_blk, sigma_xi) = object_noise(&self.config)?;
        let mut aug_keys = Vec::new();
        let mut aug_mean = DVector::zeros(3 * targets.len());
        let mut aug_map = BlockRows::new(3 * targets.len());
        let mut aug_noise = DMatrix::zeros(3 * targets.len(), 3 * targets.len());
        // Residual directions the pose cannot absorb: (H blocks on f0/ft columns, innovation).
        let mut constraints: Vec<(BlockList, DVector<f64>)> = Vec::new();

        for (a, (object, shared)) in targets.iter().enumerate() {
            let key = VariableKey::ObjectPose { time: self.time, object: *object };
            if layout.contains(&key) {
                return Err(Error::State(format!("{key} already exists")));
            }
            let lin = linearize_object(&self.belief, *object, shared)?;
            let n = shared.len();
            let w = block_diag_repeat(&w_blk, n);
            let g_tilde = &w * &lin.g_xi;
            let normal = g_tilde.tr_mul(&g_tilde);
            let gamma2 = linalg::symmetric_pinv(&normal) * g_tilde.transpose() * &w;
            // ξ = ξ⋆ + Γ₂ (r⋆ + A δf), A = [−G_f, I].
            let gamma_f0 = -(&gamma2 * &lin.g_f);
            let mut xi_mean = lin.xi.to_vector();
            if self.config.pose_mode == PoseAugmentMode::Constrained {
                xi_mean += &gamma2 * &lin.r;
            }
            aug_mean.rows_mut(3 * a, 3).copy_from(&xi_mean);
            for (i, col) in lin.f0_cols.iter().enumerate() {
                aug_map.push(3 * a, *col, gamma_f0.columns(2 * i, 2).into_owned());
            }
            for (i, col) in lin.ft_cols.iter().enumerate() {
                aug_map.push(3 * a, *col, gamma2.columns(2 * i, 2).into_owned());
            }
            let sigma_tilde = block_diag_repeat(&sigma_xi, n);
            let q = &gamma2 * sigma_tilde * gamma2.transpose();
            aug_noise.view_mut((3 * a, 3 * a), (3, 3)).copy_from(&q);
            aug_keys.push((key, 3));

            if self.config.pose_mode == PoseAugmentMode::Constrained {
                let u_perp = orthogonal_complement(&g_tilde);
                if u_perp.ncols() > 0 {
                    let proj = u_perp.transpose() * &w;
                    let h_f0 = -(&proj * &lin.g_f);
                    let mut blocks = Vec::new();
                    for (i, col) in lin.f0_cols.iter().enumerate() {
                        blocks.push((*col, h_f0.columns(2 * i, 2).into_owned()));
                    }
                    for (i, col) in lin.ft_cols.iter().enumerate() {
                        blocks.push((*col, proj.columns(2 * i, 2).into_owned()));
                    }
                    constraints.push((blocks, -(&proj * &lin.r)));
                }
            }
        }

        let mut belief = self.augment_linear(&aug_keys, aug_mean, &aug_map, &aug_noise)?;
        if !constraints.is_empty() {
            let rows: usize = constraints.iter().map(|(_, nu)| nu.len()).sum();
            let mut h = BlockRows::new(rows);
            let mut nu = DVector::zeros(rows);
            let mut row = 0;
            for (blocks, innovation) in constraints {
                for (col, b) in blocks {
                    h.push(row, col, b);
                }
                nu.rows_mut(row, innovation.len()).copy_from(&innovation);
                row += innovation.len();
            }
            belief = Self::kalman(&belief, &h, &nu, &DMatrix::identity(rows, rows))?;
        }
        self.commit(belief);
        Ok(())
    }

    /// Kalman update with measurements of static features already in the state.
    pub fn static_feature_update(&mut self, measurements: &[(usize, Vector2<f64>)]) -> Result<()> {
        if measurements.is_empty() {
            return Ok(());
        }
        let layout = self.belief.layout();
        let ego_col = layout.require(&VariableKey::EgoPose)?.start;
        let x = self.ego()?;
        let m = measurements.len();
        let mut h = BlockRows::new(2 * m);
        let mut nu = DVector::zeros(2 * m);
        let mut noise = DMatrix::zeros(2 * m, 2 * m);
        let sigma_v = to_dmatrix2(&self.config.noise.measurement);
        for (i, (k, z)) in measurements.iter().enumerate() {
            let key = VariableKey::StaticFeature(*k);
            let col = layout
                .range(&key)
                .ok_or_else(|| Error::Association(format!("static feature {k} is not in the state")))?
                .start;
            let f = self.point(&key)?;
            let (hx, hf) = models::measure_jacobians(&x, &f);
            h.push(2 * i, ego_col, DMatrix::from_column_slice(2, 3, hx.as_slice()));
            h.push(2 * i, col, to_dmatrix2(&hf));
            nu.rows_mut(2 * i, 2).copy_from(&(z - models::measure(&x, &f)));
            noise.view_mut((2 * i, 2 * i), (2, 2)).copy_from(&sigma_v);
        }
        let belief = Self::kalman(&self.belief, &h, &nu, &noise)?;
        self.commit(belief);
        Ok(())
    }

    /// Kalman update with the second-difference residual of every object
    /// that has poses at `t − 2`, `t − 1` and `t`.
    pub fn smoothing_update(&mut self) -> Result<()> {
        let layout = self.belief.layout();
        let targets = frame::smoothing_targets(layout, self.time);
        if targets.is_empty() {
            return Ok(());
        }
        let sigma_s = DMatrix::from_column_slice(3, 3, self.config.noise.smoothing.as_slice());
        let jac = models::smoothing_jacobians();
        let mut h = BlockRows::new(3 * targets.len());
        let mut nu = DVector::zeros(3 * targets.len());
        let mut noise = DMatrix::zeros(3 * targets.len(), 3 * targets.len());
        for (i, object) in targets.iter().enumerate() {
            let mut poses = [Pose2::identity(); 3];
            for (j, tau) in (self.time - 2..=self.time).enumerate() {
                let key = VariableKey::ObjectPose { time: tau, object: *object };
                let col = layout.require(&key)?.start;
                h.push(3 * i, col, DMatrix::from_column_slice(3, 3, jac[j].as_slice()));
                let m = self.belief.block_mean(&key)?;
                poses[j] = Pose2 { x: m[0], y: m[1], theta: m[2] };
            }
            let s = models::smoothing_residual(&poses[0], &poses[1], &poses[2]);
            nu.rows_mut(3 * i, 3).copy_from(&(-s));
            noise.view_mut((3 * i, 3 * i), (3, 3)).copy_from(&sigma_s);
        }
        let belief = Self::kalman(&self.belief, &h, &nu, &noise)?;
        self.commit(belief);
        Ok(())
    }

    /// `μ_x ← g(μ_x, u)`, `Σ_xx ← G Σ_xx Gᵀ + Σ_w`, `Σ_xe ← G Σ_xe`.
    pub fn state_propagate(&mut self, odometry: &Vector3<f64>) -> Result<()> {
        let r = self.belief.layout().require(&VariableKey::EgoPose)?;
        let x = self.ego()?;
        let g = DMatrix::from_column_slice(3, 3, models::ego_dynamics_jacobian().as_slice());
        let (layout, mut mean, mut cov) = std::mem::replace(&mut self.belief, GaussianBelief::empty()).into_parts();
        mean.rows_mut(r.start, 3).copy_from(&models::ego_dynamics(&x, odometry).to_vector());
        let rows = &g * cov.rows(r.start, 3);
        cov.rows_mut(r.start, 3).copy_from(&rows);
        let cols = cov.columns(r.start, 3) * g.transpose();
        cov.columns_mut(r.start, 3).copy_from(&cols);
        let mut xx = cov.view((r.start, r.start), (3, 3)).into_owned();
        xx += DMatrix::from_column_slice(3, 3, self.config.noise.process.as_slice());
        cov.view_mut((r.start, r.start), (3, 3)).copy_from(&xx);
        symmetrize(&mut cov);
        self.commit(GaussianBelief::new(layout, mean, cov)?);
        self.time += 1;
        Ok(())
    }

    /// Delete variables from the state.
    pub fn drop_variables(&mut self, keys: &[VariableKey]) -> Result<()> {
        if keys.is_empty() {
            return Ok(());
        }
        let belief = self.belief.drop_keys(keys)?;
        self.commit(belief);
        Ok(())
    }
}

impl SlamBackend for FilterState {
    fn belief(&self) -> &GaussianBelief {
        &self.belief
    }

    fn time(&self) -> u32 {
        self.time
    }

    fn config(&self) -> &FilterConfig {
        &self.config
    }

    fn process(&mut self, frame: &FrameData) -> Result<()> {
        if frame.time != self.time {
            return Err(Error::State(format!("frame {} given to a filter at time {}", frame.time, self.time)));
        }
        let plan = FramePlan::new(self.belief.layout(), frame)?;
        self.drop_variables(&frame::stale_current_features(self.belief.layout()))?;
        self.feature_augment(&plan.first_augmentation())?;
        self.object_pose_augment()?;
        self.feature_augment(&plan.new_object_augmentation())?;
        if self.config.smoothing {
            self.smoothing_update()?;
        }
        if self.config.drop_object_history {
            self.drop_variables(&frame::stale_object_poses(self.belief.layout(), self.time))?;
        }
        self.static_feature_update(&plan.existing_static)
    }

    fn propagate(&mut self, odometry: &Vector3<f64>) -> Result<()> {
        self.state_propagate(odometry)
    }
}

/// Object-motion linearization at the current means of one object's shared
/// features.
pub(crate) struct ObjectLinearization {
    pub xi: Pose2,
    pub degenerate: bool,
    /// `∂g^o/∂ξ` at `(ξ⋆, f₀)`, `2n × 3`.
    pub g_xi: DMatrix<f64>,
    /// `∂g^o/∂f₀`, `2n × 2n`.
    pub g_f: DMatrix<f64>,
    /// `f_t − g^o(ξ⋆, f₀)`.
    pub r: DVector<f64>,
    pub f0_cols: Vec<usize>,
    pub ft_cols: Vec<usize>,
}

pub(crate) fn linearize_object(belief: &GaussianBelief, object: usize, shared: &[usize]) -> Result<ObjectLinearization> {
    let layout = belief.layout();
    let mut f0 = Vec::with_capacity(shared.len());
    let mut ft = Vec::with_capacity(shared.len());
    let mut f0_cols = Vec::new();
    let mut ft_cols = Vec::new();
    for &feature in shared {
        for (epoch, pts, cols) in [(Epoch::Reference, &mut f0, &mut f0_cols), (Epoch::Current, &mut ft, &mut ft_cols)] {
            let key = VariableKey::ObjectFeature { epoch, object, feature };
            let r = layout
                .range(&key)
                .ok_or_else(|| Error::State(format!("missing {key} for pose augmentation")))?;
            pts.push(Vector2::new(belief.mean()[r.start], belief.mean()[r.start + 1]));
            cols.push(r.start);
        }
    }
    let align = models::inverse_object_transform(&f0, &ft)?;
    let predicted = models::object_transform(&align.pose, &f0)?;
    let mut r = DVector::zeros(2 * shared.len());
    for i in 0..shared.len() {
        r.rows_mut(2 * i, 2).copy_from(&(ft[i] - predicted[i]));
    }
    Ok(ObjectLinearization {
        xi: align.pose,
        degenerate: align.degenerate,
        g_xi: models::object_transform_jacobian_pose(&align.pose, &f0)?,
        g_f: models::object_transform_jacobian_cloud(&align.pose, &f0)?,
        r,
        f0_cols,
        ft_cols,
    })
}

fn object_noise(config: &FilterConfig) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let sigma = to_dmatrix2(&config.noise.object);
    Ok((linalg::spd_inv_sqrt(&sigma)?, sigma))
}

fn block_diag_repeat(block: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    linalg::block_diagonal(&vec![block.clone(); n])
}

fn to_dmatrix2(m: &Matrix2<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(2, 2, m.as_slice())
}

/// Orthonormal basis of the orthogonal complement of `range(g)`.
fn orthogonal_complement(g: &DMatrix<f64>) -> DMatrix<f64> {
    let m = g.nrows();
    let svd = g.clone().svd(true, false);
    let u = svd.u.expect("requested");
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|s| **s > linalg::PINV_RTOL * smax).count();
    if rank >= m {
        return DMatrix::zeros(m, 0);
    }
    let basis: Vec<usize> =
        (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > linalg::PINV_RTOL * smax).collect();
    let u_par = linalg::select_cols(&u, &basis);
    let projector = DMatrix::identity(m, m) - &u_par * u_par.transpose();
    let eig = projector.symmetric_eigen();
    let cols: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    linalg::select_cols(&eig.eigenvectors, &cols)
}
