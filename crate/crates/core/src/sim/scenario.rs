use std::f64::consts::PI;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{self, FeaturePosition, Pose2};

/// Highway layout and agent behaviour. All values are configuration for a
/// synthetic study, not measurements of a real road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Seconds.
    pub duration: f64,
    /// Sample period, seconds.
    pub dt: f64,
    /// Lane width, metres; lanes are centred at `y ∈ {−w, 0, w}`.
    pub lane_width: f64,
    /// Ego speed, m/s.
    pub ego_speed: f64,
    pub landmarks: usize,
    /// Lateral distance band of landmarks from the road centre, metres.
    pub landmark_offset_min: f64,
    pub landmark_offset_max: f64,
    /// Sensing radius in metres; `None` observes everything every frame.
    pub sensing_range: Option<f64>,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    /// Distance between the two tracked points on the pedestrian, metres.
    pub pedestrian_width: f64,
    /// Pedestrian walking speed, m/s.
    pub pedestrian_speed: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            duration: 60.0,
            dt: 0.5,
            lane_width: 3.5,
            ego_speed: 1000.0 / 60.0,
            landmarks: 40,
            landmark_offset_min: 8.0,
            landmark_offset_max: 20.0,
            sensing_range: None,
            vehicle_length: 4.5,
            vehicle_width: 1.8,
            pedestrian_width: 0.3,
            pedestrian_speed: 1.4,
        }
    }
}

impl ScenarioConfig {
    /// Number of frames, including both endpoints.
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("lane_width", self.lane_width),
            ("vehicle_length", self.vehicle_length),
            ("vehicle_width", self.vehicle_width),
            ("pedestrian_width", self.pedestrian_width),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::Config("scenario must have a positive duration".into()));
        }
        if !(self.landmark_offset_min >= 0.0 && self.landmark_offset_max >= self.landmark_offset_min) {
            return Err(Error::Config("landmark offset band is empty".into()));
        }
        if let Some(r) = self.sensing_range {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::Config(format!("sensing range must be positive, got {r}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
}

/// A moving object: body pose over time and a rigid set of body-frame points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub name: String,
    pub kind: AgentKind,
    pub trajectory: Vec<Pose2>,
    pub body_points: Vec<FeaturePosition>,
}

impl Agent {
    pub fn features_at(&self, step: usize) -> Vec<FeaturePosition> {
        let pose = &self.trajectory[step];
        let r = models::rotation(pose.theta);
        self.body_points.iter().map(|c| pose.translation() + r * c).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub ego: Vec<Pose2>,
    pub agents: Vec<Agent>,
    pub landmarks: Vec<FeaturePosition>,
}

impl Scenario {
    pub fn steps(&self) -> usize {
        self.ego.len()
    }

    pub fn time_of(&self, step: usize) -> f64 {
        step as f64 * self.config.dt
    }

    fn in_range(&self, step: usize, p: &FeaturePosition) -> bool {
        match self.config.sensing_range {
            None => true,
            Some(r) => (p - self.ego[step].translation()).norm() <= r,
        }
    }

    pub fn landmark_visible(&self, landmark: usize, step: usize) -> bool {
        self.in_range(step, &self.landmarks[landmark])
    }

    /// Objects are sensed as a whole, when their reference point is in range.
    pub fn agent_visible(&self, agent: usize, step: usize) -> bool {
        self.in_range(step, &self.agents[agent].trajectory[step].translation())
    }

    pub fn first_sighting(&self, agent: usize) -> Option<usize> {
        (0..self.steps()).find(|&s| self.agent_visible(agent, s))
    }

    /// True object pose at `step`: the rigid motion of the agent's point
    /// cloud since its first sighting.
    pub fn agent_pose(&self, agent: usize, step: usize) -> Option<Pose2> {
        let first = self.first_sighting(agent)?;
        if step < first {
            return None;
        }
        let a = &self.agents[agent];
        models::inverse_object_transform(&a.features_at(first), &a.features_at(step)).ok().map(|al| al.pose)
    }
}

/// Smooth lateral move from `y0` by `dy` over `[t0, t0 + span]`: value and rate.
fn lane_change(t: f64, y0: f64, dy: f64, t0: f64, span: f64) -> (f64, f64) {
    let u = ((t - t0) / span).clamp(0.0, 1.0);
    let rate = if (0.0..1.0).contains(&u) && t > t0 { dy * PI / (2.0 * span) * (PI * u).sin() } else { 0.0 };
    (y0 + dy * (1.0 - (PI * u).cos()) / 2.0, rate)
}

/// Speed ramping linearly from `v0` to `v1` over `[t0, t1]`: distance and speed.
fn ramp(t: f64, v0: f64, v1: f64, t0: f64, t1: f64) -> (f64, f64) {
    if t <= t0 {
        return (v0 * t, v0);
    }
    let a = (v1 - v0) / (t1 - t0);
    if t <= t1 {
        let s = t - t0;
        return (v0 * t0 + v0 * s + 0.5 * a * s * s, v0 + a * s);
    }
    let d1 = v0 * t0 + 0.5 * (v0 + v1) * (t1 - t0);
    (d1 + v1 * (t - t1), v1)
}

/// Road-following pose from longitudinal `(x, ẋ)` and lateral `(y, ẏ)` profiles.
fn road_pose(x0: f64, (dx, vx): (f64, f64), (y, vy): (f64, f64)) -> Pose2 {
    Pose2::new(x0 + dx, y, vy.atan2(vx))
}

fn pedestrian_track(cfg: &ScenarioConfig, start: Vector2<f64>) -> Vec<Pose2> {
    // Walks across the road with a slowly weaving heading; integrated on a
    // fine grid so that positions are consistent with the heading.
    let heading = |t: f64| PI / 2.0 + 0.3 * (2.0 * PI * t / 30.0).sin();
    let sub = 50;
    let h = cfg.dt / sub as f64;
    let mut p = start;
    let mut out = Vec::with_capacity(cfg.steps());
    for step in 0..cfg.steps() {
        let t = step as f64 * cfg.dt;
        out.push(Pose2::new(p[0], p[1], heading(t)));
        for i in 0..sub {
            let tm = t + (i as f64 + 0.5) * h;
            let th = heading(tm);
            p += cfg.pedestrian_speed * h * Vector2::new(th.cos(), th.sin());
        }
    }
    out
}

/// Deterministic highway scenario; `seed` only affects landmark placement.
pub fn build_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let n = config.steps();
    let w = config.lane_width;
    let times: Vec<f64> = (0..n).map(|s| s as f64 * config.dt).collect();

    let ego = times
        .iter()
        .map(|&t| road_pose(0.0, ramp(t, config.ego_speed, config.ego_speed, 0.0, 1.0), lane_change(t, 0.0, w, 20.0, 6.0)))
        .collect();

    let (hl, hw) = (config.vehicle_length / 2.0, config.vehicle_width / 2.0);
    let box_points = vec![
        Vector2::new(hl, hw),
        Vector2::new(hl, -hw),
        Vector2::new(-hl, -hw),
        Vector2::new(-hl, hw),
    ];
    let vehicle_1 = Agent {
        name: "vehicle_1".into(),
        kind: AgentKind::Vehicle,
        trajectory: times
            .iter()
            .map(|&t| road_pose(25.0, ramp(t, 18.0, 18.0, 0.0, 1.0), lane_change(t, -w, w, 30.0, 5.0)))
            .collect(),
        body_points: box_points.clone(),
    };
    let vehicle_2 = Agent {
        name: "vehicle_2".into(),
        kind: AgentKind::Vehicle,
        trajectory: times
            .iter()
            .map(|&t| road_pose(-20.0, ramp(t, 15.0, 20.0, 10.0, 20.0), lane_change(t, w, -w, 40.0, 6.0)))
            .collect(),
        body_points: box_points,
    };
    let pw = config.pedestrian_width / 2.0;
    let pedestrian = Agent {
        name: "pedestrian".into(),
        kind: AgentKind::Pedestrian,
        trajectory: pedestrian_track(config, Vector2::new(450.0, -15.0)),
        body_points: vec![Vector2::new(0.0, pw), Vector2::new(0.0, -pw)],
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let road_end = config.ego_speed * config.duration;
    let landmarks = (0..config.landmarks)
        .map(|k| {
            let x = rng.random_range(0.0..=road_end.max(1.0));
            let off = if config.landmark_offset_max > config.landmark_offset_min {
                rng.random_range(config.landmark_offset_min..config.landmark_offset_max)
            } else {
                config.landmark_offset_min
            };
            let side = if k % 2 == 0 { 1.0 } else { -1.0 };
            Vector2::new(x, side * off)
        })
        .collect();

    Ok(Scenario {
        config: config.clone(),
        seed,
        ego,
        agents: vec![vehicle_1, vehicle_2, pedestrian],
        landmarks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_is_continuous() {
        let (d_a, _) = ramp(10.0 - 1e-9, 15.0, 20.0, 10.0, 20.0);
        let (d_b, _) = ramp(10.0 + 1e-9, 15.0, 20.0, 10.0, 20.0);
        assert!((d_a - d_b).abs() < 1e-6);
        let (d_c, _) = ramp(20.0 - 1e-9, 15.0, 20.0, 10.0, 20.0);
        let (d_d, v) = ramp(20.0 + 1e-9, 15.0, 20.0, 10.0, 20.0);
        assert!((d_c - d_d).abs() < 1e-6);
        assert_eq!(v, 20.0);
    }

    #[test]
    fn lane_change_endpoints() {
        assert_eq!(lane_change(0.0, 1.0, 3.5, 5.0, 2.0), (1.0, 0.0));
        let (y, r) = lane_change(10.0, 1.0, 3.5, 5.0, 2.0);
        assert!((y - 4.5).abs() < 1e-12 && r == 0.0);
    }
}
