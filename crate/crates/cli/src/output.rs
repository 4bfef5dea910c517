//! Delimited-text writers. Every file starts with `#` comment lines that
//! carry the tool version, seeds and the full effective configuration.

use std::fmt::Write as _;

use dynslam_core::sim::{EntityGroup, FrameEstimate, MonteCarloReport, Scenario};

use crate::config::RunConfig;

pub fn header(command: &str, config: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# dynslam {} {command}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "# seed={} scenario_seed={} runs={}", config.seed, config.scenario_seed, config.runs);
    for line in config.to_toml().lines().filter(|l| !l.is_empty()) {
        let _ = writeln!(s, "# {line}");
    }
    s
}

fn groups(scenario: &Scenario) -> Vec<EntityGroup> {
    let n = scenario.agents.len();
    let mut g = vec![EntityGroup::EgoPoses, EntityGroup::StaticFeatures];
    g.extend((0..n).map(EntityGroup::AgentFeatures));
    g.extend((0..n).map(EntityGroup::AgentPoses));
    g
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

/// One row per noise level; RMS columns per entity group and axis. Feature
/// groups have no heading column.
pub fn rms_table(scenario: &Scenario, config: &RunConfig, reports: &[&MonteCarloReport]) -> String {
    let mut s = header("run", config);
    let groups = groups(scenario);
    let mut cols = vec!["noise".to_string(), "backend".into(), "runs".into(), "failed_runs".into()];
    for g in &groups {
        cols.push(format!("{g}_x_m"));
        cols.push(format!("{g}_y_m"));
        if g.has_heading() {
            cols.push(format!("{g}_theta_rad"));
        }
    }
    let _ = writeln!(s, "{}", cols.join(","));
    for r in reports {
        let mut row = vec![format!("\"{}\"", r.level), r.backend.to_string(), r.runs.to_string(), r.failures.len().to_string()];
        for g in &groups {
            let cell = r.rms.get(*g);
            row.push(num(cell.map(|c| c.x)));
            row.push(num(cell.map(|c| c.y)));
            if g.has_heading() {
                row.push(num(cell.and_then(|c| c.theta)));
            }
        }
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

/// Truth and estimate for every entity at every frame.
pub fn trajectory_table(scenario: &Scenario, config: &RunConfig, estimates: &[FrameEstimate]) -> String {
    let mut s = header("dump", config);
    let _ = writeln!(s, "step,time_s,entity,true_x_m,true_y_m,true_theta_rad,est_x_m,est_y_m,est_theta_rad");
    let mut row = |step: usize, entity: String, truth: [Option<f64>; 3], est: [Option<f64>; 3]| {
        let f = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(
            s,
            "{step},{},{entity},{},{},{},{},{},{}",
            scenario.time_of(step),
            f(truth[0]),
            f(truth[1]),
            f(truth[2]),
            f(est[0]),
            f(est[1]),
            f(est[2])
        );
    };
    for (step, est) in estimates.iter().enumerate() {
        let t = &scenario.ego[step];
        row(step, "ego".into(), [Some(t.x), Some(t.y), Some(t.theta)], [Some(est.ego.x), Some(est.ego.y), Some(est.ego.theta)]);
        for (k, l) in scenario.landmarks.iter().enumerate() {
            let e = est.static_features.iter().find(|(i, _)| *i == k).map(|(_, p)| *p);
            row(step, format!("landmark_{k}"), [Some(l[0]), Some(l[1]), None], [e.map(|p| p[0]), e.map(|p| p[1]), None]);
        }
        for (a, agent) in scenario.agents.iter().enumerate() {
            for (k, f) in agent.features_at(step).iter().enumerate() {
                let e = est.agent_features.iter().find(|(i, j, _)| *i == a && *j == k).map(|(_, _, p)| *p);
                row(
                    step,
                    format!("agent_{}_feature_{k}", a + 1),
                    [Some(f[0]), Some(f[1]), None],
                    [e.map(|p| p[0]), e.map(|p| p[1]), None],
                );
            }
            let truth = scenario.agent_pose(a, step);
            let e = est.agent_poses.iter().find(|(i, _)| *i == a).map(|(_, p)| *p);
            row(
                step,
                format!("agent_{}_pose", a + 1),
                [truth.map(|p| p.x), truth.map(|p| p.y), truth.map(|p| p.theta)],
                [e.map(|p| p.x), e.map(|p| p.y), e.map(|p| p.theta)],
            );
        }
    }
    s
}
