//! Synthetic highway scenario, noisy data generation, Monte Carlo runs and
//! error metrics.

mod frames;
mod metrics;
mod monte_carlo;
mod scenario;

pub use frames::{sample_initial_pose, simulate_frames, stream_rng, GaussianSampler};
pub use metrics::{compute_rms, EntityGroup, FrameEstimate, GroupRms, RmsAccumulator, RmsReport};
pub use monte_carlo::{
    belief_deviation, compare_backends, ego_nees, run_filter, run_inputs, run_monte_carlo, BackendComparison,
    BackendKind, MonteCarloConfig, MonteCarloReport, NoiseLevel, RunFailure, RunInputs, RunResult, StepDeviation,
};
pub use scenario::{build_scenario, Agent, AgentKind, Scenario, ScenarioConfig};
