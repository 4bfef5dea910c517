//! Per-timestep sensor data and the bookkeeping that sorts it into the
//! filter's sub-steps.

use std::collections::BTreeSet;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadcost::{Epoch, VariableKey, VariableLayout};

/// Which scenario entity a measurement belongs to (supplied by the caller;
/// there is no data association here).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Association {
    /// Static landmark `k`; new to the filter if `k` is not yet in the state.
    Static(usize),
    /// Feature of an object that is already tracked.
    Object { object: usize, feature: usize },
    /// Feature of an object seen for the first time in this frame.
    NewObject { object: usize, feature: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Body-frame point (m).
    pub z: Vector2<f64>,
    pub association: Association,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameData {
    pub time: u32,
    /// Odometry to the next frame; `None` on the last frame.
    pub odometry: Option<Vector3<f64>>,
    pub measurements: Vec<Measurement>,
}

impl FrameData {
    pub fn empty(time: u32, odometry: Option<Vector3<f64>>) -> Self {
        Self { time, odometry, measurements: Vec::new() }
    }
}

/// A frame's measurements sorted by the sub-step that consumes them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FramePlan {
    /// Static landmarks not yet in the state.
    pub new_static: Vec<(usize, Vector2<f64>)>,
    /// Static landmarks already in the state.
    pub existing_static: Vec<(usize, Vector2<f64>)>,
    /// Current-epoch features of tracked objects: `(object, feature, z)`.
    pub object_current: Vec<(usize, usize, Vector2<f64>)>,
    /// Reference-epoch features of newly declared objects.
    pub new_objects: Vec<(usize, usize, Vector2<f64>)>,
}

impl FramePlan {
    /// Classify `frame` against the variables present in `layout`.
    pub fn new(layout: &VariableLayout, frame: &FrameData) -> Result<Self> {
        let tracked: BTreeSet<usize> = layout.objects().into_iter().collect();
        let mut seen = BTreeSet::new();
        let mut plan = FramePlan::default();
        for m in &frame.measurements {
            if !m.z.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("non-finite measurement for {:?}", m.association)));
            }
            if !seen.insert(m.association) {
                return Err(Error::Association(format!("{:?} measured twice in one frame", m.association)));
            }
            match m.association {
                Association::Static(k) => {
                    if layout.contains(&VariableKey::StaticFeature(k)) {
                        plan.existing_static.push((k, m.z));
                    } else {
                        plan.new_static.push((k, m.z));
                    }
                }
                Association::Object { object, feature } => {
                    if !tracked.contains(&object) {
                        return Err(Error::Association(format!("object {object} is not tracked")));
                    }
                    plan.object_current.push((object, feature, m.z));
                }
                Association::NewObject { object, feature } => {
                    if tracked.contains(&object) {
                        return Err(Error::Association(format!("object {object} is already tracked")));
                    }
                    plan.new_objects.push((object, feature, m.z));
                }
            }
        }
        if let Some(&(o, _, _)) = plan.object_current.iter().find(|(o, _, _)| plan.new_objects.iter().any(|n| n.0 == *o)) {
            return Err(Error::Association(format!("object {o} declared new and tracked in the same frame")));
        }
        plan.new_static.sort_by_key(|e| e.0);
        plan.existing_static.sort_by_key(|e| e.0);
        plan.object_current.sort_by_key(|e| (e.0, e.1));
        plan.new_objects.sort_by_key(|e| (e.0, e.1));
        Ok(plan)
    }

    pub fn is_empty(&self) -> bool {
        self.new_static.is_empty()
            && self.existing_static.is_empty()
            && self.object_current.is_empty()
            && self.new_objects.is_empty()
    }

    /// Keys and measurements to augment before pose augmentation: new static
    /// features then current object features.
    pub fn first_augmentation(&self) -> Vec<(VariableKey, Vector2<f64>)> {
        let mut out: Vec<_> = self.new_static.iter().map(|&(k, z)| (VariableKey::StaticFeature(k), z)).collect();
        out.extend(self.object_current.iter().map(|&(object, feature, z)| {
            (VariableKey::ObjectFeature { epoch: Epoch::Current, object, feature }, z)
        }));
        out
    }

    /// Reference-cloud keys of newly declared objects.
    pub fn new_object_augmentation(&self) -> Vec<(VariableKey, Vector2<f64>)> {
        self.new_objects
            .iter()
            .map(|&(object, feature, z)| (VariableKey::ObjectFeature { epoch: Epoch::Reference, object, feature }, z))
            .collect()
    }
}

/// Current-epoch object features: these are re-created every frame, so the
/// previous frame's copies are removed first.
pub fn stale_current_features(layout: &VariableLayout) -> Vec<VariableKey> {
    layout.select(|k| matches!(k, VariableKey::ObjectFeature { epoch: Epoch::Current, .. }))
}

/// Object poses older than `time − 2`.
pub fn stale_object_poses(layout: &VariableLayout, time: u32) -> Vec<VariableKey> {
    layout.select(|k| matches!(k, VariableKey::ObjectPose { time: tau, .. } if *tau + 2 < time))
}

/// Objects whose reference and current clouds share at least one feature,
/// with the shared feature ids.
pub fn pose_augmentation_targets(layout: &VariableLayout) -> Vec<(usize, Vec<usize>)> {
    layout
        .objects()
        .into_iter()
        .filter_map(|object| {
            let current: BTreeSet<usize> = layout.object_features(object, Epoch::Current).into_iter().collect();
            let shared: Vec<usize> = layout
                .object_features(object, Epoch::Reference)
                .into_iter()
                .filter(|f| current.contains(f))
                .collect();
            (!shared.is_empty()).then_some((object, shared))
        })
        .collect()
}

/// Objects with poses at `time − 2`, `time − 1` and `time`.
pub fn smoothing_targets(layout: &VariableLayout, time: u32) -> Vec<usize> {
    if time < 2 {
        return Vec::new();
    }
    layout
        .objects()
        .into_iter()
        .filter(|&object| {
            (time - 2..=time).all(|tau| layout.contains(&VariableKey::ObjectPose { time: tau, object }))
        })
        .collect()
}
