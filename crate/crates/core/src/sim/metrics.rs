use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::scenario::Scenario;
use crate::error::{Error, Result};
use crate::frame::{Association, FrameData};
use crate::models::{wrap_angle, FeaturePosition, Pose2};
use crate::quadcost::{Epoch, GaussianBelief, VariableKey};

/// Entity groups of the error report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityGroup {
    EgoPoses,
    StaticFeatures,
    AgentFeatures(usize),
    AgentPoses(usize),
}

impl EntityGroup {
    /// Whether the group has a heading axis.
    pub fn has_heading(&self) -> bool {
        matches!(self, EntityGroup::EgoPoses | EntityGroup::AgentPoses(_))
    }
}

impl fmt::Display for EntityGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntityGroup::EgoPoses => write!(f, "ego_poses"),
            EntityGroup::StaticFeatures => write!(f, "static_features"),
            EntityGroup::AgentFeatures(a) => write!(f, "agent_{}_features", a + 1),
            EntityGroup::AgentPoses(a) => write!(f, "agent_{}_poses", a + 1),
        }
    }
}

/// What the filter believes at one frame, after that frame's updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEstimate {
    pub step: usize,
    pub ego: Pose2,
    pub static_features: Vec<(usize, FeaturePosition)>,
    /// `(agent, feature, position)`: the current cloud if present, otherwise
    /// the reference cloud (the frame of first sighting).
    pub agent_features: Vec<(usize, usize, FeaturePosition)>,
    /// `(agent, pose)` for agents with a pose at this frame.
    pub agent_poses: Vec<(usize, Pose2)>,
}

impl FrameEstimate {
    /// Read the estimate for `frame` from a belief taken after the frame's
    /// updates and before propagation.
    pub fn from_belief(belief: &GaussianBelief, frame: &FrameData) -> Result<Self> {
        let step = frame.time as usize;
        let layout = belief.layout();
        let mean = belief.mean();
        let point = |r: std::ops::Range<usize>| Vector2::new(mean[r.start], mean[r.start + 1]);
        let pose = |r: std::ops::Range<usize>| Pose2 { x: mean[r.start], y: mean[r.start + 1], theta: mean[r.start + 2] };
        // Objects declared in this frame only have a reference cloud, which
        // is their estimate for now.
        let new_objects: BTreeSet<usize> = frame
            .measurements
            .iter()
            .filter_map(|m| match m.association {
                Association::NewObject { object, .. } => Some(object),
                _ => None,
            })
            .collect();
        let ego = pose(layout.require(&VariableKey::EgoPose)?);
        let mut static_features = Vec::new();
        let mut agent_features = Vec::new();
        let mut agent_poses = Vec::new();
        for block in layout.blocks() {
            match block.key {
                VariableKey::StaticFeature(k) => static_features.push((k, point(block.range()))),
                VariableKey::ObjectFeature { epoch: Epoch::Current, object, feature } => {
                    agent_features.push((object, feature, point(block.range())));
                }
                VariableKey::ObjectFeature { epoch: Epoch::Reference, object, feature } if new_objects.contains(&object) => {
                    agent_features.push((object, feature, point(block.range())));
                }
                VariableKey::ObjectPose { time, object } if time as usize == step => {
                    agent_poses.push((object, pose(block.range())));
                }
                _ => {}
            }
        }
        Ok(Self { step, ego, static_features, agent_features, agent_poses })
    }
}

/// RMS errors per group and axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRms {
    pub group: EntityGroup,
    /// Metres.
    pub x: f64,
    /// Metres.
    pub y: f64,
    /// Radians; absent for point features.
    pub theta: Option<f64>,
    /// Number of (run, frame, entity) samples.
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RmsReport {
    pub groups: Vec<GroupRms>,
}

impl RmsReport {
    pub fn get(&self, group: EntityGroup) -> Option<&GroupRms> {
        self.groups.iter().find(|g| g.group == group)
    }

    pub fn max_abs(&self) -> f64 {
        self.groups.iter().flat_map(|g| [g.x, g.y, g.theta.unwrap_or(0.0)]).fold(0.0, f64::max)
    }
}

/// Sums of squared errors; merge per-run accumulators, then [`finish`](Self::finish).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RmsAccumulator {
    sums: BTreeMap<EntityGroup, ([f64; 3], usize)>,
}

impl RmsAccumulator {
    fn add(&mut self, group: EntityGroup, err: [f64; 3]) {
        let entry = self.sums.entry(group).or_insert(([0.0; 3], 0));
        for (s, e) in entry.0.iter_mut().zip(err) {
            *s += e * e;
        }
        entry.1 += 1;
    }

    /// Add the errors of one frame estimate against the scenario truth.
    pub fn add_frame(&mut self, scenario: &Scenario, est: &FrameEstimate) -> Result<()> {
        if est.step >= scenario.steps() {
            return Err(Error::Metric(format!("estimate for step {} beyond scenario end", est.step)));
        }
        let truth = &scenario.ego[est.step];
        self.add(EntityGroup::EgoPoses, pose_error(&est.ego, truth));
        for (k, f) in &est.static_features {
            let t = scenario
                .landmarks
                .get(*k)
                .ok_or_else(|| Error::Metric(format!("no landmark {k} in scenario")))?;
            self.add(EntityGroup::StaticFeatures, [f[0] - t[0], f[1] - t[1], 0.0]);
        }
        for (a, k, f) in &est.agent_features {
            let agent = scenario.agents.get(*a).ok_or_else(|| Error::Metric(format!("no agent {a}")))?;
            let t = agent
                .features_at(est.step)
                .get(*k)
                .copied()
                .ok_or_else(|| Error::Metric(format!("agent {a} has no feature {k}")))?;
            self.add(EntityGroup::AgentFeatures(*a), [f[0] - t[0], f[1] - t[1], 0.0]);
        }
        for (a, p) in &est.agent_poses {
            let t = scenario
                .agent_pose(*a, est.step)
                .ok_or_else(|| Error::Metric(format!("agent {a} has no true pose at step {}", est.step)))?;
            self.add(EntityGroup::AgentPoses(*a), pose_error(p, &t));
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &RmsAccumulator) {
        for (g, (s, n)) in &other.sums {
            let entry = self.sums.entry(*g).or_insert(([0.0; 3], 0));
            for (acc, v) in entry.0.iter_mut().zip(s) {
                *acc += v;
            }
            entry.1 += n;
        }
    }

    pub fn finish(&self) -> RmsReport {
        let groups = self
            .sums
            .iter()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(g, (s, n))| {
                let rms = |v: f64| (v / *n as f64).sqrt();
                GroupRms { group: *g, x: rms(s[0]), y: rms(s[1]), theta: g.has_heading().then(|| rms(s[2])), samples: *n }
            })
            .collect();
        RmsReport { groups }
    }
}

fn pose_error(est: &Pose2, truth: &Pose2) -> [f64; 3] {
    [est.x - truth.x, est.y - truth.y, wrap_angle(est.theta - truth.theta)]
}

/// RMS over runs, frames and entities. Every run must cover every frame.
pub fn compute_rms(scenario: &Scenario, runs: &[Vec<FrameEstimate>]) -> Result<RmsReport> {
    let mut acc = RmsAccumulator::default();
    for (r, run) in runs.iter().enumerate() {
        if run.len() != scenario.steps() {
            return Err(Error::Metric(format!(
                "run {r} has {} estimates for a {}-frame scenario",
                run.len(),
                scenario.steps()
            )));
        }
        for est in run {
            acc.add_frame(scenario, est)?;
        }
    }
    Ok(acc.finish())
}
