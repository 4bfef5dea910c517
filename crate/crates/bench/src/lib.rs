//! Shared fixtures for the benchmarks: the default highway scenario at one
//! noise level, and filters advanced to a given frame.

use dynslam_core::sim::{build_scenario, run_inputs, MonteCarloConfig, NoiseLevel, RunInputs, Scenario, ScenarioConfig};
use dynslam_core::{FilterConfig, FilterState, OptimizationFilter, SlamBackend};

pub struct Fixture {
    pub scenario: Scenario,
    pub inputs: RunInputs,
    pub config: FilterConfig,
}

impl Fixture {
    /// Default scenario, run 0 of seed 0, with or without object history dropping.
    pub fn new(level: NoiseLevel, drop_history: bool) -> Self {
        let scenario = build_scenario(&ScenarioConfig::default(), 0).expect("default scenario is valid");
        let inputs = run_inputs(&scenario, level, 0, 0).expect("inputs for a valid scenario");
        let mut config = MonteCarloConfig::default().filter_config(level).expect("grid levels have noise");
        config.drop_object_history = drop_history;
        Self { scenario, inputs, config }
    }

    pub fn standard(&self) -> FilterState {
        FilterState::init(self.config.clone(), self.inputs.prior_mean, &self.inputs.prior_cov).expect("valid prior")
    }

    pub fn optimization(&self) -> OptimizationFilter {
        OptimizationFilter::init(self.config.clone(), self.inputs.prior_mean, &self.inputs.prior_cov).expect("valid prior")
    }

    /// Run `filter` through the first `frames` frames.
    pub fn advance<F: SlamBackend>(&self, mut filter: F, frames: usize) -> F {
        for frame in &self.inputs.frames[..frames] {
            filter.step(frame).expect("noisy run succeeds");
        }
        filter
    }

    /// Every frame, as one full run.
    pub fn full_run<F: SlamBackend>(&self, filter: F) -> F {
        self.advance(filter, self.inputs.frames.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advance_moves_the_filter_clock() {
        let fx = Fixture::new(NoiseLevel::Grid { process: 1, measurement: 1 }, true);
        let f = fx.advance(fx.standard(), 5);
        assert_eq!(f.time(), 5);
    }
}
