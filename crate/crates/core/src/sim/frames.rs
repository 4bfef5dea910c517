use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use super::scenario::Scenario;
use crate::frame::{Association, FrameData, Measurement};
use crate::models::{self, NoiseModel, Pose2};
use crate::quadcost::linalg;

/// Independent stream `stream` of the generator rooted at `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws from `N(0, Σ)` through the symmetric square root, so a zero
/// covariance yields exact zeros.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    sqrt: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(cov: &DMatrix<f64>) -> Self {
        Self { sqrt: linalg::psd_sqrt(cov) }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.sqrt.nrows();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.sqrt * z
    }
}

/// Noisy odometry and measurements for every frame of `scenario`.
///
/// Odometry is the true pose increment plus `N(0, Σ_w)`; each measurement is
/// `h(true ego, true feature) + N(0, Σ_v)`. Objects are declared new in the
/// frame of their first sighting.
pub fn simulate_frames<R: Rng + ?Sized>(scenario: &Scenario, noise: &NoiseModel, rng: &mut R) -> Vec<FrameData> {
    let w = GaussianSampler::new(&DMatrix::from_column_slice(3, 3, noise.process.as_slice()));
    let v = GaussianSampler::new(&DMatrix::from_column_slice(2, 2, noise.measurement.as_slice()));
    let n = scenario.steps();
    let first: Vec<Option<usize>> = (0..scenario.agents.len()).map(|a| scenario.first_sighting(a)).collect();
    let mut frames = Vec::with_capacity(n);
    for step in 0..n {
        let ego = &scenario.ego[step];
        let mut measurements = Vec::new();
        let mut observe = |f: &Vector2<f64>, association: Association, rng: &mut R| {
            let z = models::measure(ego, f) + Vector2::from_column_slice(v.sample(rng).as_slice());
            measurements.push(Measurement { z, association });
        };
        for (k, f) in scenario.landmarks.iter().enumerate() {
            if scenario.landmark_visible(k, step) {
                observe(f, Association::Static(k), rng);
            }
        }
        for (object, agent) in scenario.agents.iter().enumerate() {
            if !scenario.agent_visible(object, step) {
                continue;
            }
            let is_new = first[object] == Some(step);
            for (feature, f) in agent.features_at(step).iter().enumerate() {
                let association = if is_new {
                    Association::NewObject { object, feature }
                } else {
                    Association::Object { object, feature }
                };
                observe(f, association, rng);
            }
        }
        let odometry = (step + 1 < n).then(|| {
            scenario.ego[step + 1].delta(ego) + Vector3::from_column_slice(w.sample(rng).as_slice())
        });
        frames.push(FrameData { time: step as u32, odometry, measurements });
    }
    frames
}

/// Initial ego estimate: the true start pose plus `N(0, Σ₀)`.
pub fn sample_initial_pose<R: Rng + ?Sized>(truth: &Pose2, cov: &DMatrix<f64>, rng: &mut R) -> Pose2 {
    let e = GaussianSampler::new(cov).sample(rng);
    Pose2::new(truth.x + e[0], truth.y + e[1], truth.theta + e[2])
}
