//! Dynamic EKF SLAM with moving-object tracking, in two interchangeable
//! forms: an optimization form that collapses a running quadratic cost with
//! single Gauss-Newton and marginalization steps, and a standard form that
//! updates covariance blocks directly.

pub mod backend;
pub mod equivalence;
pub mod error;
pub mod frame;
pub mod models;
pub mod optimization;
pub mod quadcost;
pub mod sim;
pub mod snapshot;
pub mod standard;

pub use backend::{DropPolicy, FilterConfig, PoseAugmentMode, SlamBackend};
pub use error::{Error, Result};
pub use frame::{Association, FrameData, Measurement};
pub use models::{EgoPose, FeaturePosition, NoiseModel, ObjectPose, Pose2};
pub use optimization::{OptimizationFilter, RunningCost};
pub use quadcost::{GaussianBelief, VariableKey, VariableLayout};
pub use snapshot::BeliefSnapshot;
pub use standard::FilterState;
