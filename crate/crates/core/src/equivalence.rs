//! Randomized check that every covariance-form sub-step reproduces the
//! corresponding Gauss-Newton or marginalization step of the optimization
//! form, starting from the same belief.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::{DropPolicy, FilterConfig, PoseAugmentMode};
use crate::error::Result;
use crate::frame;
use crate::models::{self, wrap_angle, NoiseModel, Pose2};
use crate::optimization::OptimizationFilter;
use crate::quadcost::{Epoch, GaussianBelief, VariableKey, VariableLayout};
use crate::sim::{belief_deviation, stream_rng};
use crate::standard::FilterState;

/// Largest random state dimension.
pub const MAX_STATE_DIM: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubStep {
    FeatureAugment,
    PoseAugment,
    Smoothing,
    StaticUpdate,
    Propagate,
    Drop,
}

impl SubStep {
    pub const ALL: [SubStep; 6] = [
        SubStep::FeatureAugment,
        SubStep::PoseAugment,
        SubStep::Smoothing,
        SubStep::StaticUpdate,
        SubStep::Propagate,
        SubStep::Drop,
    ];
}

impl fmt::Display for SubStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SubStep::FeatureAugment => "feature_augment",
            SubStep::PoseAugment => "pose_augment",
            SubStep::Smoothing => "smoothing_update",
            SubStep::StaticUpdate => "static_feature_update",
            SubStep::Propagate => "state_propagate",
            SubStep::Drop => "drop_variables",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    pub seed: u64,
    pub trials: usize,
    /// Relative tolerance on mean and covariance.
    pub tolerance: f64,
    /// Give the object-motion noise a correlation between x and y; the pose
    /// step is then outside its guarantee and reported as skipped.
    pub correlated_object_noise: bool,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self { seed: 0, trials: 100, tolerance: 1e-8, correlated_object_noise: false }
    }
}

/// Outcome for one sub-step over all trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubStepSummary {
    pub step: SubStep,
    pub checked: usize,
    pub skipped: usize,
    pub max_mean_deviation: f64,
    pub max_cov_deviation: f64,
    /// Trial with the largest deviation.
    pub worst_trial: Option<usize>,
    /// `(trial, error)` for trials where either form failed.
    pub errors: Vec<(usize, String)>,
}

impl SubStepSummary {
    fn new(step: SubStep) -> Self {
        Self {
            step,
            checked: 0,
            skipped: 0,
            max_mean_deviation: 0.0,
            max_cov_deviation: 0.0,
            worst_trial: None,
            errors: Vec::new(),
        }
    }

    pub fn max_deviation(&self) -> f64 {
        self.max_mean_deviation.max(self.max_cov_deviation)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.errors.is_empty() && self.max_deviation() <= tolerance
    }

    fn record(&mut self, trial: usize, outcome: Result<Option<(f64, f64)>>) {
        match outcome {
            Ok(None) => self.skipped += 1,
            Ok(Some((m, c))) => {
                self.checked += 1;
                if m.max(c) > self.max_deviation() || self.worst_trial.is_none() {
                    self.worst_trial = Some(trial);
                }
                self.max_mean_deviation = self.max_mean_deviation.max(m);
                self.max_cov_deviation = self.max_cov_deviation.max(c);
            }
            Err(e) => self.errors.push((trial, e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub config: EquivalenceConfig,
    pub steps: Vec<SubStepSummary>,
    /// Largest random state dimension drawn.
    pub max_state_dim: usize,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.steps.iter().all(|s| s.passed(self.config.tolerance))
    }

    pub fn get(&self, step: SubStep) -> Option<&SubStepSummary> {
        self.steps.iter().find(|s| s.step == step)
    }
}

/// A random filter state at time `time` with its noise configuration.
#[derive(Debug, Clone)]
pub struct RandomState {
    pub belief: GaussianBelief,
    pub time: u32,
    pub config: FilterConfig,
    /// `(object, number of features)`, with reference and current clouds.
    pub objects: Vec<(usize, usize)>,
    pub n_static: usize,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| normal(rng));
    let mut s = &m * m.transpose() / n as f64 + DMatrix::identity(n, n) * 0.2;
    s *= scale;
    crate::quadcost::linalg::symmetrize(&mut s);
    s
}

fn random_noise<R: Rng + ?Sized>(rng: &mut R, correlated_object: bool) -> NoiseModel {
    let process = Matrix3::from_diagonal(&Vector3::new(
        rng.random_range(0.01..0.1),
        rng.random_range(0.01..0.1),
        rng.random_range(0.001..0.01),
    ));
    let a: f64 = rng.random_range(0.01..0.1);
    let c: f64 = rng.random_range(0.01..0.1);
    let b = rng.random_range(-0.5..0.5) * (a * c).sqrt();
    let measurement = Matrix2::new(a, b, b, c);
    let ox: f64 = rng.random_range(0.05..0.2);
    let oy: f64 = rng.random_range(0.05..0.2);
    let oxy = if correlated_object { 0.5 * (ox * oy).sqrt() } else { 0.0 };
    NoiseModel {
        process,
        measurement,
        object: Matrix2::new(ox, oxy, oxy, oy),
        smoothing: Matrix3::from_diagonal(&Vector3::new(
            rng.random_range(0.05..0.2),
            rng.random_range(0.05..0.2),
            rng.random_range(0.01..0.05),
        )),
    }
}

/// Draw a random state of dimension at most [`MAX_STATE_DIM`]: ego pose,
/// static features, one or two objects with reference and current clouds
/// related by a rigid motion plus noise, and poses of object 0 at `t − 2`
/// and `t − 1` (and `t` with `pose_at_t`).
pub fn random_state<R: Rng + ?Sized>(rng: &mut R, correlated_object: bool, pose_at_t: bool) -> Result<RandomState> {
    let time = rng.random_range(2..20u32);
    loop {
        let n_static = rng.random_range(1..=3usize);
        let mut objects = vec![(0usize, rng.random_range(1..=3usize))];
        if rng.random_bool(0.5) {
            objects.push((1, rng.random_range(1..=2usize)));
        }
        let pose_times: Vec<u32> = if pose_at_t { vec![time - 2, time - 1, time] } else { vec![time - 2, time - 1] };
        let dim = 3 + 2 * n_static + objects.iter().map(|(_, n)| 4 * n).sum::<usize>() + 3 * pose_times.len();
        if dim > MAX_STATE_DIM {
            continue;
        }
        let mut keys = vec![VariableKey::EgoPose];
        let mut mean = vec![
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-3.0..3.0),
        ];
        for k in 0..n_static {
            keys.push(VariableKey::StaticFeature(k));
            mean.extend([rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)]);
        }
        let mut clouds = Vec::new();
        for &(object, n) in &objects {
            let center = Vector2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let f0: Vec<Vector2<f64>> =
                (0..n).map(|_| center + Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
            let motion = Pose2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
            let ft: Vec<Vector2<f64>> = models::object_transform(&motion, &f0)?
                .into_iter()
                .map(|p| p + 0.05 * Vector2::new(normal(rng), normal(rng)))
                .collect();
            clouds.push((object, f0, ft));
        }
        for (object, f0, _) in &clouds {
            for (feature, p) in f0.iter().enumerate() {
                keys.push(VariableKey::ObjectFeature { epoch: Epoch::Reference, object: *object, feature });
                mean.extend([p[0], p[1]]);
            }
        }
        for (object, _, ft) in &clouds {
            for (feature, p) in ft.iter().enumerate() {
                keys.push(VariableKey::ObjectFeature { epoch: Epoch::Current, object: *object, feature });
                mean.extend([p[0], p[1]]);
            }
        }
        for &tau in &pose_times {
            keys.push(VariableKey::ObjectPose { time: tau, object: 0 });
            mean.extend([rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)]);
        }
        let layout = VariableLayout::from_keys(keys)?;
        let cov = random_spd(rng, dim, 0.05);
        let belief = GaussianBelief::new(layout, DVector::from_vec(mean), cov)?;
        let config = FilterConfig {
            noise: random_noise(rng, correlated_object),
            drop_object_history: true,
            smoothing: true,
            pose_mode: PoseAugmentMode::Constrained,
            drop_policy: DropPolicy::Delete,
        };
        return Ok(RandomState { belief, time, config, objects, n_static });
    }
}

fn pair(state: &RandomState) -> Result<(FilterState, OptimizationFilter)> {
    Ok((
        FilterState::from_belief(state.config.clone(), state.belief.clone(), state.time)?,
        OptimizationFilter::from_belief(state.config.clone(), state.belief.clone(), state.time)?,
    ))
}

fn compare(std: &FilterState, opt: &OptimizationFilter) -> Result<Option<(f64, f64)>> {
    use crate::backend::SlamBackend;
    belief_deviation(std.belief(), opt.belief()).map(Some)
}

fn noisy_measurement<R: Rng + ?Sized>(rng: &mut R, belief: &GaussianBelief, key: &VariableKey) -> Result<Vector2<f64>> {
    let x = belief.block_mean(&VariableKey::EgoPose)?;
    let f = belief.block_mean(key)?;
    let z = models::measure(&Pose2::new(x[0], x[1], x[2]), &Vector2::new(f[0], f[1]));
    Ok(z + 0.2 * Vector2::new(normal(rng), normal(rng)))
}

/// Per sub-step outcome of one trial: `None` when skipped, otherwise the
/// (mean, covariance) deviations.
type TrialOutcome = Vec<(SubStep, Result<Option<(f64, f64)>>)>;

/// Run every sub-step on one random state with both forms.
fn trial<R: Rng + ?Sized>(rng: &mut R, cfg: &EquivalenceConfig) -> Result<(usize, TrialOutcome)> {
    let state = random_state(rng, cfg.correlated_object_noise, false)?;
    let dim = state.belief.dim();
    let mut out = Vec::new();

    // New static features and the reference cloud of a new object.
    let new_keys = [
        VariableKey::StaticFeature(state.n_static),
        VariableKey::StaticFeature(state.n_static + 1),
        VariableKey::ObjectFeature { epoch: Epoch::Reference, object: 7, feature: 0 },
        VariableKey::ObjectFeature { epoch: Epoch::Reference, object: 7, feature: 1 },
    ];
    let features: Vec<(VariableKey, Vector2<f64>)> = new_keys
        .iter()
        .map(|k| (*k, Vector2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0))))
        .collect();
    out.push((SubStep::FeatureAugment, (|| {
        let (mut s, mut o) = pair(&state)?;
        s.feature_augment(&features)?;
        o.feature_augment(&features)?;
        compare(&s, &o)
    })()));

    out.push((SubStep::PoseAugment, (|| {
        if !state.config.noise.object_is_diagonal() {
            return Ok(None);
        }
        let (mut s, mut o) = pair(&state)?;
        s.object_pose_augment()?;
        o.object_pose_augment()?;
        compare(&s, &o)
    })()));

    // Smoothing needs poses at t − 2, t − 1 and t, drawn with a full-rank
    // covariance (a pose added from a single-feature cloud has a singular one).
    let smooth_state = random_state(rng, cfg.correlated_object_noise, true)?;
    out.push((SubStep::Smoothing, (|| {
        let (mut s, mut o) = pair(&smooth_state)?;
        s.smoothing_update()?;
        o.smoothing_update()?;
        compare(&s, &o)
    })()));

    let meas: Vec<(usize, Vector2<f64>)> = (0..state.n_static)
        .map(|k| Ok((k, noisy_measurement(rng, &state.belief, &VariableKey::StaticFeature(k))?)))
        .collect::<Result<_>>()?;
    out.push((SubStep::StaticUpdate, (|| {
        let (mut s, mut o) = pair(&state)?;
        s.static_feature_update(&meas)?;
        o.static_feature_update(&meas)?;
        compare(&s, &o)
    })()));

    let odom = Vector3::new(normal(rng), normal(rng), wrap_angle(0.3 * normal(rng)));
    out.push((SubStep::Propagate, (|| {
        let (mut s, mut o) = pair(&state)?;
        s.state_propagate(&odom)?;
        o.state_propagate(&odom)?;
        compare(&s, &o)
    })()));

    let stale = frame::stale_current_features(state.belief.layout());
    out.push((SubStep::Drop, (|| {
        let marg = RandomState {
            config: FilterConfig { drop_policy: DropPolicy::Marginalize, ..state.config.clone() },
            ..state.clone()
        };
        let (mut s, _) = pair(&state)?;
        let (_, mut o) = pair(&marg)?;
        s.drop_variables(&stale)?;
        o.drop_variables(&stale)?;
        compare(&s, &o)
    })()));

    Ok((dim, out))
}

/// Run `config.trials` random trials; trial `i` draws from stream `i` of the
/// seed, so any single trial can be replayed.
pub fn run_equivalence(config: &EquivalenceConfig) -> EquivalenceReport {
    let mut steps: Vec<SubStepSummary> = SubStep::ALL.iter().map(|s| SubStepSummary::new(*s)).collect();
    let mut max_state_dim = 0;
    for i in 0..config.trials {
        let mut rng = stream_rng(config.seed, i as u64);
        match trial(&mut rng, config) {
            Ok((dim, outcomes)) => {
                max_state_dim = max_state_dim.max(dim);
                for (step, outcome) in outcomes {
                    steps.iter_mut().find(|s| s.step == step).expect("all steps listed").record(i, outcome);
                }
            }
            Err(e) => {
                for s in &mut steps {
                    s.errors.push((i, format!("state generation failed: {e}")));
                }
            }
        }
    }
    EquivalenceReport { config: config.clone(), steps, max_state_dim }
}
