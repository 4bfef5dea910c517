//! Configuration and interface shared by the two filter forms.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::frame::FrameData;
use crate::models::{wrap_angle, NoiseModel};
use crate::quadcost::GaussianBelief;
use crate::snapshot::BeliefSnapshot;

/// How the covariance form adds object poses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseAugmentMode {
    /// Augment the pose, then condition the clouds on the part of the
    /// object-motion residual that the pose cannot absorb. Matches a
    /// Gauss-Newton step on the object-motion cost for any cloud size.
    #[default]
    Constrained,
    /// Augment the pose only. Matches the Gauss-Newton step only when the
    /// pose can absorb the whole residual (single-feature clouds).
    AugmentOnly,
}

/// How variables leave the optimization-form state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPolicy {
    /// Delete rows and columns of the prior.
    #[default]
    Delete,
    /// Schur-complement the prior term. For a Gaussian prior this is the
    /// same marginal, computed the long way.
    Marginalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub noise: NoiseModel,
    /// Keep only the three most recent poses per object.
    pub drop_object_history: bool,
    /// Apply the second-difference smoothing cost to object poses.
    pub smoothing: bool,
    pub pose_mode: PoseAugmentMode,
    pub drop_policy: DropPolicy,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            noise: NoiseModel::default(),
            drop_object_history: true,
            smoothing: false,
            pose_mode: PoseAugmentMode::Constrained,
            drop_policy: DropPolicy::Delete,
        }
    }
}

impl FilterConfig {
    pub fn with_noise(noise: NoiseModel) -> Self {
        Self { noise, ..Self::default() }
    }
}

/// A dynamic SLAM filter advanced one frame at a time.
pub trait SlamBackend: Send {
    fn belief(&self) -> &GaussianBelief;

    /// Index of the frame the filter expects next.
    fn time(&self) -> u32;

    fn config(&self) -> &FilterConfig;

    /// All measurement-driven sub-steps of one frame, without propagation.
    fn process(&mut self, frame: &FrameData) -> Result<()>;

    /// Move the ego pose to the next timestep.
    fn propagate(&mut self, odometry: &Vector3<f64>) -> Result<()>;

    /// The belief in canonical order, ready for serialization.
    fn snapshot(&self) -> BeliefSnapshot {
        BeliefSnapshot::new(self.belief(), self.time())
    }

    fn step(&mut self, frame: &FrameData) -> Result<()> {
        self.process(frame)?;
        if let Some(odom) = &frame.odometry {
            self.propagate(odom)?;
        }
        Ok(())
    }
}

/// Re-wrap the heading component of every pose block of the mean.
pub(crate) fn wrap_headings(belief: &mut GaussianBelief) {
    let offsets: Vec<usize> =
        belief.layout().blocks().iter().filter(|b| b.key.is_pose()).map(|b| b.offset + 2).collect();
    let mean = belief.mean_mut();
    for i in offsets {
        mean[i] = wrap_angle(mean[i]);
    }
}
