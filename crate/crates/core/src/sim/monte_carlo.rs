use std::fmt;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::frames::{sample_initial_pose, simulate_frames, stream_rng};
use super::metrics::{FrameEstimate, RmsAccumulator, RmsReport};
use super::scenario::Scenario;
use crate::backend::{FilterConfig, SlamBackend};
use crate::error::{Error, Result};
use crate::frame::FrameData;
use crate::models::{wrap_angle, NoiseModel, Pose2};
use crate::optimization::OptimizationFilter;
use crate::quadcost::{linalg, GaussianBelief, VariableKey};
use crate::standard::FilterState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Standard,
    Optimization,
}

impl BackendKind {
    pub const ALL: [BackendKind; 2] = [BackendKind::Standard, BackendKind::Optimization];

    pub fn short_name(&self) -> &'static str {
        match self {
            BackendKind::Standard => "std",
            BackendKind::Optimization => "opt",
        }
    }

    pub fn build(&self, config: FilterConfig, prior_mean: Pose2, prior_cov: &DMatrix<f64>) -> Result<Box<dyn SlamBackend>> {
        Ok(match self {
            BackendKind::Standard => Box::new(FilterState::init(config, prior_mean, prior_cov)?),
            BackendKind::Optimization => Box::new(OptimizationFilter::init(config, prior_mean, prior_cov)?),
        })
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Noise setting of one Monte Carlo cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    /// Process level `i` and measurement level `j`, both in `1..=3`.
    Grid { process: u8, measurement: u8 },
    /// Noise-free data; the filter still assumes the level-(1, 1) noise.
    Zero,
}

impl NoiseLevel {
    pub fn grid() -> Vec<NoiseLevel> {
        (1..=3).flat_map(|i| (1..=3).map(move |j| NoiseLevel::Grid { process: i, measurement: j })).collect()
    }

    /// Noise used to generate the data.
    pub fn data_noise(&self) -> Result<NoiseModel> {
        match *self {
            NoiseLevel::Grid { process, measurement } => NoiseModel::level(process, measurement),
            NoiseLevel::Zero => Ok(NoiseModel::level(1, 1)?.noiseless()),
        }
    }

    /// Noise the filter is configured with.
    pub fn filter_noise(&self) -> Result<NoiseModel> {
        match *self {
            NoiseLevel::Grid { .. } => self.data_noise(),
            NoiseLevel::Zero => NoiseModel::level(1, 1),
        }
    }
}

impl fmt::Display for NoiseLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseLevel::Grid { process, measurement } => write!(f, "{process},{measurement}"),
            NoiseLevel::Zero => f.write_str("zero"),
        }
    }
}

/// Everything that determines a Monte Carlo cell besides the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    /// Root seed; run `r` draws from stream `r` of it.
    pub seed: u64,
    pub runs: usize,
    /// Structural options; the noise is replaced per level.
    pub filter: FilterConfig,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self { seed: 0, runs: 25, filter: FilterConfig::default() }
    }
}

impl MonteCarloConfig {
    pub fn filter_config(&self, level: NoiseLevel) -> Result<FilterConfig> {
        Ok(FilterConfig { noise: level.filter_noise()?, ..self.filter.clone() })
    }
}

/// Simulated inputs of one run: the prior and the frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RunInputs {
    pub prior_mean: Pose2,
    pub prior_cov: DMatrix<f64>,
    pub frames: Vec<FrameData>,
}

/// Inputs of run `run`. Identical for every backend, so runs can be compared.
pub fn run_inputs(scenario: &Scenario, level: NoiseLevel, seed: u64, run: usize) -> Result<RunInputs> {
    let data = level.data_noise()?;
    let filter = level.filter_noise()?;
    let mut rng = stream_rng(seed, run as u64);
    let sigma0 = DMatrix::from_column_slice(3, 3, data.process.as_slice());
    let prior_mean = sample_initial_pose(&scenario.ego[0], &sigma0, &mut rng);
    let frames = simulate_frames(scenario, &data, &mut rng);
    let prior_cov = DMatrix::from_column_slice(3, 3, filter.process.as_slice());
    Ok(RunInputs { prior_mean, prior_cov, frames })
}

/// Per-run output of [`run_filter`].
#[derive(Debug, Clone)]
pub struct RunResult {
    pub estimates: Vec<FrameEstimate>,
    /// Wall-clock time of each frame: update plus propagation.
    pub step_times: Vec<Duration>,
    /// Normalized squared ego error after each frame's updates.
    pub nees: Vec<f64>,
    /// `(step, health)` of covariance snapshots outside tolerance.
    pub psd_violations: Vec<(usize, linalg::CovarianceHealth)>,
}

impl RunResult {
    pub fn total_time(&self) -> Duration {
        self.step_times.iter().sum()
    }
}

/// Normalized squared ego error of `belief` against the true pose.
pub fn ego_nees(belief: &GaussianBelief, truth: &Pose2) -> Result<f64> {
    let mu = belief.block_mean(&VariableKey::EgoPose)?;
    let e = DVector::from_vec(vec![mu[0] - truth.x, mu[1] - truth.y, wrap_angle(mu[2] - truth.theta)]);
    let cov = belief.cov_block(&VariableKey::EgoPose, &VariableKey::EgoPose)?;
    let x = linalg::spd_solve(&cov, &DMatrix::from_column_slice(3, 1, e.as_slice()))?;
    Ok(e.dot(&x.column(0)))
}

/// Run one filter over `inputs`, checking the covariance after every frame.
pub fn run_filter(
    backend: BackendKind,
    config: FilterConfig,
    scenario: &Scenario,
    inputs: &RunInputs,
) -> Result<RunResult> {
    let mut filter = backend.build(config, inputs.prior_mean, &inputs.prior_cov)?;
    let n = inputs.frames.len();
    let mut out = RunResult {
        estimates: Vec::with_capacity(n),
        step_times: Vec::with_capacity(n),
        nees: Vec::with_capacity(n),
        psd_violations: Vec::new(),
    };
    for frame in &inputs.frames {
        let start = Instant::now();
        filter.process(frame)?;
        let mid = start.elapsed();
        let belief = filter.belief();
        let step = frame.time as usize;
        out.estimates.push(FrameEstimate::from_belief(belief, frame)?);
        out.nees.push(ego_nees(belief, &scenario.ego[step])?);
        check_covariance(belief, step, &mut out.psd_violations);
        let mut elapsed = mid;
        if let Some(odom) = &frame.odometry {
            let start = Instant::now();
            filter.propagate(odom)?;
            elapsed += start.elapsed();
            check_covariance(filter.belief(), step, &mut out.psd_violations);
        }
        out.step_times.push(elapsed);
    }
    Ok(out)
}

fn check_covariance(belief: &GaussianBelief, step: usize, out: &mut Vec<(usize, linalg::CovarianceHealth)>) {
    if !linalg::covariance_is_healthy(belief.covariance()) {
        out.push((step, linalg::covariance_health(belief.covariance())));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: usize,
    pub error: String,
}

/// Aggregate of one (level, backend) Monte Carlo cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub level: NoiseLevel,
    pub backend: BackendKind,
    pub runs: usize,
    pub rms: RmsReport,
    pub failures: Vec<RunFailure>,
    /// Mean over runs and frames, seconds.
    pub mean_step_time: f64,
    /// Largest single-frame time, seconds.
    pub max_step_time: f64,
    /// Mean over runs of the full-run time, seconds.
    pub mean_run_time: f64,
    /// Mean ego NEES over runs and frames (ego dimension is 3).
    pub mean_nees: f64,
    /// Covariance snapshots outside tolerance, over all runs.
    pub psd_violations: usize,
}

impl MonteCarloReport {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Independent runs of one backend at one noise level; runs execute in
/// parallel and are reduced in run order, so the report is deterministic
/// apart from timings. A failed run is recorded, not silently dropped.
pub fn run_monte_carlo(
    scenario: &Scenario,
    config: &MonteCarloConfig,
    level: NoiseLevel,
    backend: BackendKind,
) -> Result<MonteCarloReport> {
    if config.runs == 0 {
        return Err(Error::Config("at least one run is required".into()));
    }
    let filter = config.filter_config(level)?;
    let results: Vec<Result<(RmsAccumulator, RunResult)>> = (0..config.runs)
        .into_par_iter()
        .map(|run| {
            let inputs = run_inputs(scenario, level, config.seed, run)?;
            let result = run_filter(backend, filter.clone(), scenario, &inputs)?;
            let mut acc = RmsAccumulator::default();
            for est in &result.estimates {
                acc.add_frame(scenario, est)?;
            }
            Ok((acc, result))
        })
        .collect();

    let mut acc = RmsAccumulator::default();
    let mut failures = Vec::new();
    let (mut steps, mut step_sum, mut max_step, mut run_sum) = (0usize, 0.0, 0.0f64, 0.0);
    let (mut nees_sum, mut nees_n, mut psd_violations) = (0.0, 0usize, 0usize);
    let mut ok = 0usize;
    for (run, res) in results.into_iter().enumerate() {
        match res {
            Ok((a, r)) => {
                ok += 1;
                acc.merge(&a);
                for t in &r.step_times {
                    let s = t.as_secs_f64();
                    step_sum += s;
                    max_step = max_step.max(s);
                }
                steps += r.step_times.len();
                run_sum += r.total_time().as_secs_f64();
                nees_sum += r.nees.iter().sum::<f64>();
                nees_n += r.nees.len();
                psd_violations += r.psd_violations.len();
            }
            Err(e) => failures.push(RunFailure { run, error: e.to_string() }),
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok(MonteCarloReport {
        level,
        backend,
        runs: config.runs,
        rms: acc.finish(),
        failures,
        mean_step_time: mean(step_sum, steps),
        max_step_time: max_step,
        mean_run_time: mean(run_sum, ok),
        mean_nees: mean(nees_sum, nees_n),
        psd_violations,
    })
}

/// Deviation between the two backends after one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDeviation {
    pub step: usize,
    /// After the frame's updates.
    pub mean_after_update: f64,
    pub cov_after_update: f64,
    /// After propagation; zero on the last frame.
    pub mean_after_propagate: f64,
    pub cov_after_propagate: f64,
}

impl StepDeviation {
    pub fn max(&self) -> f64 {
        self.mean_after_update
            .max(self.cov_after_update)
            .max(self.mean_after_propagate)
            .max(self.cov_after_propagate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendComparison {
    pub steps: Vec<StepDeviation>,
}

impl BackendComparison {
    pub fn max_deviation(&self) -> f64 {
        self.steps.iter().map(StepDeviation::max).fold(0.0, f64::max)
    }
}

/// Mean and covariance deviations, relative in the Frobenius norm, of two
/// beliefs over the same variables.
pub fn belief_deviation(a: &GaussianBelief, b: &GaussianBelief) -> Result<(f64, f64)> {
    if !a.layout().is_permutation_of(b.layout()) {
        return Err(Error::State("beliefs hold different variables".into()));
    }
    let b = b.reorder(a.layout())?;
    // Headings near ±π may be wrapped differently by the two backends.
    let mut diff = a.mean() - b.mean();
    for block in a.layout().blocks().iter().filter(|blk| blk.key.is_pose()) {
        let i = block.offset + 2;
        diff[i] = wrap_angle(diff[i]);
    }
    let scale = a.mean().norm().max(b.mean().norm());
    let mean_dev = if scale == 0.0 { diff.norm() } else { diff.norm() / scale };
    Ok((mean_dev, linalg::relative_deviation(a.covariance(), b.covariance())))
}

/// Run both backends in lockstep on the same inputs and record their
/// deviation after every sub-step group.
pub fn compare_backends(config: FilterConfig, inputs: &RunInputs) -> Result<BackendComparison> {
    let mut std = BackendKind::Standard.build(config.clone(), inputs.prior_mean, &inputs.prior_cov)?;
    let mut opt = BackendKind::Optimization.build(config, inputs.prior_mean, &inputs.prior_cov)?;
    let mut steps = Vec::with_capacity(inputs.frames.len());
    for frame in &inputs.frames {
        std.process(frame)?;
        opt.process(frame)?;
        let (mean_after_update, cov_after_update) = belief_deviation(std.belief(), opt.belief())?;
        let (mut mean_after_propagate, mut cov_after_propagate) = (0.0, 0.0);
        if let Some(odom) = &frame.odometry {
            std.propagate(odom)?;
            opt.propagate(odom)?;
            (mean_after_propagate, cov_after_propagate) = belief_deviation(std.belief(), opt.belief())?;
        }
        steps.push(StepDeviation {
            step: frame.time as usize,
            mean_after_update,
            cov_after_update,
            mean_after_propagate,
            cov_after_propagate,
        });
    }
    Ok(BackendComparison { steps })
}
