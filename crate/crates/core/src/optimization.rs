//! Optimization-form dynamic EKF SLAM: a running quadratic cost (a Gaussian
//! prior plus freshly added residual terms) collapsed back to a prior by one
//! Gauss-Newton or marginalization step after each group of terms.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};

use crate::backend::{wrap_headings, DropPolicy, FilterConfig, SlamBackend};
use crate::error::{Error, Result};
use crate::frame::{self, FrameData, FramePlan};
use crate::models::{self, FeaturePosition, Pose2};
use crate::quadcost::{
    gauss_newton_step, linalg, marginalize, Epoch, GaussianBelief, ResidualModel, ResidualTerm, SolveMode, VariableKey,
    VariableLayout,
};

/// `h(x, f) − z` on `(EgoPose, feature)`.
#[derive(Debug, Clone)]
pub struct MeasurementFactor {
    pub z: Vector2<f64>,
}

impl ResidualModel for MeasurementFactor {
    fn dim(&self) -> usize {
        2
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let (pose, f) = split_pose_point(x);
        DVector::from_column_slice((models::measure(&pose, &f) - self.z).as_slice())
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (pose, f) = split_pose_point(x);
        let (hx, hf) = models::measure_jacobians(&pose, &f);
        let mut j = DMatrix::zeros(2, 5);
        j.view_mut((0, 0), (2, 3)).copy_from(&hx);
        j.view_mut((0, 3), (2, 2)).copy_from(&hf);
        j
    }
}

/// `f_{t,k} − g^o(ξ, f₀)_k` on `(ObjectPose, f₀ cloud…, f_{t,k})`.
#[derive(Debug, Clone)]
pub struct ObjectTransformFactor {
    /// Position of the feature within the reference cloud.
    pub index: usize,
    pub cloud_size: usize,
}

impl ObjectTransformFactor {
    fn unpack(&self, x: &DVector<f64>) -> (Pose2, Vec<FeaturePosition>, FeaturePosition) {
        let xi = Pose2 { x: x[0], y: x[1], theta: x[2] };
        let cloud = (0..self.cloud_size).map(|i| Vector2::new(x[3 + 2 * i], x[4 + 2 * i])).collect();
        let o = 3 + 2 * self.cloud_size;
        (xi, cloud, Vector2::new(x[o], x[o + 1]))
    }
}

impl ResidualModel for ObjectTransformFactor {
    fn dim(&self) -> usize {
        2
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let (xi, cloud, ft) = self.unpack(x);
        let moved = models::object_transform(&xi, &cloud).expect("cloud is non-empty");
        DVector::from_column_slice((ft - moved[self.index]).as_slice())
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (xi, cloud, _) = self.unpack(x);
        let n = self.cloud_size;
        let g_xi = models::object_transform_jacobian_pose(&xi, &cloud).expect("cloud is non-empty");
        let g_f = models::object_transform_jacobian_cloud(&xi, &cloud).expect("cloud is non-empty");
        let mut j = DMatrix::zeros(2, 5 + 2 * n);
        j.view_mut((0, 0), (2, 3)).copy_from(&(-g_xi.rows(2 * self.index, 2)));
        j.view_mut((0, 3), (2, 2 * n)).copy_from(&(-g_f.rows(2 * self.index, 2)));
        j.view_mut((0, 3 + 2 * n), (2, 2)).copy_from(&DMatrix::identity(2, 2));
        j
    }
}

/// `s(ξ_{t−2}, ξ_{t−1}, ξ_t)` on three consecutive object poses.
#[derive(Debug, Clone)]
pub struct SmoothingFactor;

impl ResidualModel for SmoothingFactor {
    fn dim(&self) -> usize {
        3
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = |i: usize| Pose2 { x: x[3 * i], y: x[3 * i + 1], theta: x[3 * i + 2] };
        DVector::from_column_slice(models::smoothing_residual(&p(0), &p(1), &p(2)).as_slice())
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(3, 9);
        for (i, b) in models::smoothing_jacobians().iter().enumerate() {
            j.view_mut((0, 3 * i), (3, 3)).copy_from(b);
        }
        j
    }
}

/// `x_{t+1} − g(x_t, u)` on `(EgoPose, NextEgoPose)`, heading wrapped.
#[derive(Debug, Clone)]
pub struct DynamicsFactor {
    pub odometry: Vector3<f64>,
}

impl ResidualModel for DynamicsFactor {
    fn dim(&self) -> usize {
        3
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let prev = Pose2 { x: x[0], y: x[1], theta: x[2] };
        let next = Pose2 { x: x[3], y: x[4], theta: x[5] };
        let predicted = models::ego_dynamics(&prev, &self.odometry);
        DVector::from_column_slice(next.delta(&predicted).as_slice())
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(3, 6);
        j.view_mut((0, 0), (3, 3)).copy_from(&(-models::ego_dynamics_jacobian()));
        j.view_mut((0, 3), (3, 3)).copy_from(&DMatrix::identity(3, 3));
        j
    }
}

fn split_pose_point(x: &DVector<f64>) -> (Pose2, FeaturePosition) {
    (Pose2 { x: x[0], y: x[1], theta: x[2] }, Vector2::new(x[3], x[4]))
}

/// Whether measurement terms introduce new features or observe existing ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureRole {
    New,
    Existing,
}

/// `‖x̃ − μ‖²_{Σ⁻¹}` plus pending terms, some of which may reference
/// variables that do not exist in the prior yet.
#[derive(Debug, Clone)]
pub struct RunningCost {
    prior: GaussianBelief,
    pending: Vec<ResidualTerm>,
    new_vars: Vec<(VariableKey, DVector<f64>)>,
    mode: SolveMode,
}

impl RunningCost {
    pub fn new(prior: GaussianBelief) -> Self {
        Self { prior, pending: Vec::new(), new_vars: Vec::new(), mode: SolveMode::Strict }
    }

    pub fn prior(&self) -> &GaussianBelief {
        &self.prior
    }

    pub fn pending(&self) -> &[ResidualTerm] {
        &self.pending
    }

    pub fn new_variables(&self) -> impl Iterator<Item = &VariableKey> {
        self.new_vars.iter().map(|(k, _)| k)
    }

    fn knows(&self, key: &VariableKey) -> bool {
        self.prior.layout().contains(key) || self.new_vars.iter().any(|(k, _)| k == key)
    }

    fn ego(&self) -> Result<Pose2> {
        let m = self.prior.block_mean(&VariableKey::EgoPose)?;
        Ok(Pose2 { x: m[0], y: m[1], theta: m[2] })
    }

    fn add_new_variable(&mut self, key: VariableKey, value: DVector<f64>) -> Result<()> {
        if self.knows(&key) {
            return Err(Error::layout(format!("{key} already exists")));
        }
        self.new_vars.push((key, value));
        Ok(())
    }

    /// Point-measurement terms; new features start at `ℓ(μ_x, z)`.
    pub fn add_measurement_terms(
        &mut self,
        measurements: &[(VariableKey, Vector2<f64>)],
        role: FeatureRole,
        noise: &DMatrix<f64>,
    ) -> Result<()> {
        let x = self.ego()?;
        for (key, z) in measurements {
            match role {
                FeatureRole::New => {
                    let f = models::inverse_measure(&x, z);
                    self.add_new_variable(*key, DVector::from_column_slice(f.as_slice()))?;
                }
                FeatureRole::Existing => {
                    if !self.knows(key) {
                        return Err(Error::UnknownKey(*key));
                    }
                }
            }
            let model = Arc::new(MeasurementFactor { z: *z });
            self.pending.push(ResidualTerm::new(vec![VariableKey::EgoPose, *key], model, noise)?);
        }
        Ok(())
    }

    /// One object-motion term per shared feature of every object with
    /// overlapping reference and current clouds; the new pose `ξ_{t,α}`
    /// starts at `γ(f₀, f_t)`. Returns whether any cloud was degenerate.
    pub fn add_object_transform_terms(&mut self, time: u32, noise: &DMatrix<f64>) -> Result<bool> {
        let mut degenerate = false;
        for (object, shared) in frame::pose_augmentation_targets(self.prior.layout()) {
            let lin = crate::standard::linearize_object(&self.prior, object, &shared)?;
            degenerate |= lin.degenerate;
            let pose_key = VariableKey::ObjectPose { time, object };
            self.add_new_variable(pose_key, DVector::from_column_slice(lin.xi.to_vector().as_slice()))?;
            let reference: Vec<VariableKey> = shared
                .iter()
                .map(|&feature| VariableKey::ObjectFeature { epoch: Epoch::Reference, object, feature })
                .collect();
            for (index, &feature) in shared.iter().enumerate() {
                let mut keys = vec![pose_key];
                keys.extend(&reference);
                keys.push(VariableKey::ObjectFeature { epoch: Epoch::Current, object, feature });
                let model = Arc::new(ObjectTransformFactor { index, cloud_size: shared.len() });
                self.pending.push(ResidualTerm::new(keys, model, noise)?);
            }
        }
        if degenerate {
            self.mode = SolveMode::Pseudo;
        }
        Ok(degenerate)
    }

    /// Second-difference terms for every object with poses at `t−2..=t`.
    pub fn add_smoothing_terms(&mut self, time: u32, noise: &DMatrix<f64>) -> Result<()> {
        for object in frame::smoothing_targets(self.prior.layout(), time) {
            let keys = (time - 2..=time).map(|tau| VariableKey::ObjectPose { time: tau, object }).collect();
            self.pending.push(ResidualTerm::new(keys, Arc::new(SmoothingFactor), noise)?);
        }
        Ok(())
    }

    /// Dynamics term on a new `NextEgoPose`, which starts at `g(μ_x, u)`.
    pub fn add_dynamics_term(&mut self, odometry: &Vector3<f64>, noise: &DMatrix<f64>) -> Result<()> {
        let next = models::ego_dynamics(&self.ego()?, odometry);
        self.add_new_variable(VariableKey::NextEgoPose, DVector::from_column_slice(next.to_vector().as_slice()))?;
        let model = Arc::new(DynamicsFactor { odometry: *odometry });
        self.pending.push(ResidualTerm::new(vec![VariableKey::EgoPose, VariableKey::NextEgoPose], model, noise)?);
        Ok(())
    }

    /// Layout and linearization point: prior variables at their means, new
    /// variables at their initial values.
    fn linearization(&self) -> Result<(VariableLayout, DVector<f64>)> {
        let mut layout = self.prior.layout().clone();
        let mut point: Vec<f64> = self.prior.mean().iter().copied().collect();
        for (key, value) in &self.new_vars {
            layout.push(*key, value.len())?;
            point.extend(value.iter());
        }
        Ok((layout, DVector::from_vec(point)))
    }

    fn terms(&self) -> Result<Vec<ResidualTerm>> {
        let mut terms = Vec::with_capacity(self.pending.len() + 1);
        terms.push(ResidualTerm::prior(&self.prior)?);
        terms.extend(self.pending.iter().cloned());
        Ok(terms)
    }

    fn reset(&mut self, mut belief: GaussianBelief) {
        belief = belief.to_canonical();
        wrap_headings(&mut belief);
        self.prior = belief;
        self.pending.clear();
        self.new_vars.clear();
        self.mode = SolveMode::Strict;
    }

    /// One Gauss-Newton step about the prior mean and new-variable initial
    /// values; the result becomes the new prior. A no-op when nothing is pending.
    pub fn gn_collapse(&mut self) -> Result<()> {
        if self.pending.is_empty() && self.new_vars.is_empty() {
            return Ok(());
        }
        let (layout, point) = self.linearization()?;
        let belief = gauss_newton_step(&self.terms()?, &layout, &point, self.mode)?;
        self.reset(belief);
        Ok(())
    }

    /// Linearize and eliminate `marg`; the remaining variables keep their
    /// order with new variables last.
    pub fn marg_collapse(&mut self, marg: &[VariableKey]) -> Result<()> {
        let (layout, point) = self.linearization()?;
        let keep: Vec<VariableKey> = layout.keys().filter(|k| !marg.contains(k)).collect();
        let belief = marginalize(&self.terms()?, &layout, &keep, marg, &point)?;
        self.reset(belief);
        Ok(())
    }

    /// Remove variables from the prior (pending terms must be empty).
    pub fn drop_variables(&mut self, keys: &[VariableKey], policy: DropPolicy) -> Result<()> {
        if keys.is_empty() {
            return Ok(());
        }
        if !self.pending.is_empty() || !self.new_vars.is_empty() {
            return Err(Error::State("cannot drop variables with terms pending".into()));
        }
        let belief = match policy {
            DropPolicy::Delete => self.prior.drop_keys(keys)?,
            DropPolicy::Marginalize => self.marginalize_prior(keys)?,
        };
        self.reset(belief);
        Ok(())
    }

    fn marginalize_prior(&self, keys: &[VariableKey]) -> Result<GaussianBelief> {
        let layout = self.prior.layout();
        let keep: Vec<VariableKey> = layout.keys().filter(|k| !keys.contains(k)).collect();
        marginalize(&[ResidualTerm::prior(&self.prior)?], layout, &keep, keys, self.prior.mean())
    }

    /// Replace the prior's `NextEgoPose` block by `EgoPose`.
    fn promote_next_ego(&mut self) -> Result<()> {
        let (layout, mean, cov) = self.prior.clone().into_parts();
        let renamed = VariableLayout::from_blocks(layout.blocks().iter().map(|b| {
            let key = if b.key == VariableKey::NextEgoPose { VariableKey::EgoPose } else { b.key };
            (key, b.dim)
        }))?;
        self.reset(GaussianBelief::new(renamed, mean, cov)?);
        Ok(())
    }
}

/// Optimization-form filter.
#[derive(Debug, Clone)]
pub struct OptimizationFilter {
    config: FilterConfig,
    cost: RunningCost,
    time: u32,
}

impl OptimizationFilter {
    pub fn init(config: FilterConfig, prior_mean: Pose2, prior_cov: &DMatrix<f64>) -> Result<Self> {
        if prior_cov.shape() != (3, 3) {
            return Err(Error::layout("ego prior covariance must be 3x3"));
        }
        linalg::spd_inv_sqrt(prior_cov)?;
        let layout = VariableLayout::from_keys([VariableKey::EgoPose])?;
        let mean = DVector::from_column_slice(prior_mean.to_vector().as_slice());
        let prior = GaussianBelief::checked(layout, mean, prior_cov.clone())?;
        Ok(Self { config, cost: RunningCost::new(prior), time: 0 })
    }

    pub fn from_belief(config: FilterConfig, belief: GaussianBelief, time: u32) -> Result<Self> {
        if !belief.layout().contains(&VariableKey::EgoPose) {
            return Err(Error::State("belief has no ego pose".into()));
        }
        Ok(Self { config, cost: RunningCost::new(belief.to_canonical()), time })
    }

    pub fn cost(&self) -> &RunningCost {
        &self.cost
    }

    fn measurement_noise(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 2, self.config.noise.measurement.as_slice())
    }

    /// New-feature terms, then one Gauss-Newton step.
    pub fn feature_augment(&mut self, features: &[(VariableKey, Vector2<f64>)]) -> Result<()> {
        let noise = self.measurement_noise();
        self.cost.add_measurement_terms(features, FeatureRole::New, &noise)?;
        self.cost.gn_collapse()
    }

    /// Object-motion terms, then one Gauss-Newton step.
    pub fn object_pose_augment(&mut self) -> Result<()> {
        let noise = DMatrix::from_column_slice(2, 2, self.config.noise.object.as_slice());
        self.cost.add_object_transform_terms(self.time, &noise)?;
        self.cost.gn_collapse()
    }

    /// Existing-static-feature terms, then one Gauss-Newton step.
    pub fn static_feature_update(&mut self, measurements: &[(usize, Vector2<f64>)]) -> Result<()> {
        let noise = self.measurement_noise();
        let keyed: Vec<_> = measurements.iter().map(|&(k, z)| (VariableKey::StaticFeature(k), z)).collect();
        self.cost.add_measurement_terms(&keyed, FeatureRole::Existing, &noise)?;
        self.cost.gn_collapse()
    }

    /// Smoothing terms, then one Gauss-Newton step.
    pub fn smoothing_update(&mut self) -> Result<()> {
        let noise = DMatrix::from_column_slice(3, 3, self.config.noise.smoothing.as_slice());
        self.cost.add_smoothing_terms(self.time, &noise)?;
        self.cost.gn_collapse()
    }

    /// Dynamics term, then marginalization of the old ego pose, linearized
    /// about `(μ_x, g(μ_x, u))`.
    pub fn state_propagate(&mut self, odometry: &Vector3<f64>) -> Result<()> {
        let noise = DMatrix::from_column_slice(3, 3, self.config.noise.process.as_slice());
        self.cost.add_dynamics_term(odometry, &noise)?;
        self.cost.marg_collapse(&[VariableKey::EgoPose])?;
        self.cost.promote_next_ego()?;
        self.time += 1;
        Ok(())
    }

    pub fn drop_variables(&mut self, keys: &[VariableKey]) -> Result<()> {
        self.cost.drop_variables(keys, self.config.drop_policy)
    }
}

impl SlamBackend for OptimizationFilter {
    fn belief(&self) -> &GaussianBelief {
        self.cost.prior()
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
        let plan = FramePlan::new(self.cost.prior().layout(), frame)?;
        self.drop_variables(&frame::stale_current_features(self.cost.prior().layout()))?;
        self.feature_augment(&plan.first_augmentation())?;
        self.object_pose_augment()?;
        self.feature_augment(&plan.new_object_augmentation())?;
        if self.config.smoothing {
            self.smoothing_update()?;
        }
        if self.config.drop_object_history {
            self.drop_variables(&frame::stale_object_poses(self.cost.prior().layout(), self.time))?;
        }
        self.static_feature_update(&plan.existing_static)
    }

    fn propagate(&mut self, odometry: &Vector3<f64>) -> Result<()> {
        self.state_propagate(odometry)
    }
}
