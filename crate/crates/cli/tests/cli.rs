use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SHORT_SCENARIO: &str = "[scenario]\nduration = 5.0\n";

fn dynslam(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynslam"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("DYNSLAM_OUT")
        .output()
        .expect("binary runs")
}

fn bare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynslam")).args(args).output().expect("binary runs")
}

fn short_config(dir: &TempDir) -> String {
    let path = dir.path().join("short.toml");
    fs::write(&path, SHORT_SCENARIO).unwrap();
    path.to_string_lossy().into_owned()
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_tables_and_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = short_config(&dir);
    let out = dir.path().join("a");
    let o = dynslam(&["run", "--config", &cfg, "--runs", "3", "--noise", "2,1"], &out);
    assert!(o.status.success(), "{}", stderr(&o));

    let rows = data_lines(&out.join("rms_std.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("noise,backend,runs,failed_runs,ego_poses_x_m"));
    assert!(rows[1].starts_with("\"2,1\",std,3,0,"));
    assert!(!out.join("rms_opt.csv").exists());

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "run");
    assert_eq!(manifest["config"]["runs"], 3);
    assert_eq!(manifest["cells"][0]["psd_violations"], 0);
    assert!(manifest["cells"][0]["mean_step_ms"].as_f64().unwrap() > 0.0);
}

#[test]
fn runs_are_deterministic_and_reproducible_from_the_saved_config() {
    let dir = TempDir::new().unwrap();
    let cfg = short_config(&dir);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let args = ["run", "--config", &cfg, "--runs", "2", "--seed", "17", "--noise", "all"];
    assert!(dynslam(&args, &a).status.success());
    assert!(dynslam(&args, &b).status.success());
    let table = fs::read_to_string(a.join("rms_std.csv")).unwrap();
    assert_eq!(table, fs::read_to_string(b.join("rms_std.csv")).unwrap());
    assert_eq!(data_lines(&a.join("rms_std.csv")).len(), 10);

    let saved = a.join("config.toml");
    let o = dynslam(&["run", "--config", saved.to_str().unwrap()], &c);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(data_lines(&a.join("rms_std.csv")), data_lines(&c.join("rms_std.csv")));

    let d = dir.path().join("d");
    assert!(dynslam(&["run", "--config", &cfg, "--runs", "2", "--seed", "18", "--noise", "1,1"], &d).status.success());
    assert_ne!(data_lines(&a.join("rms_std.csv"))[1], data_lines(&d.join("rms_std.csv"))[1]);
}

#[test]
fn both_backends_agree() {
    let dir = TempDir::new().unwrap();
    let cfg = short_config(&dir);
    let out = dir.path().join("both");
    let o = dynslam(&["run", "--config", &cfg, "--runs", "1", "--backend", "both"], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let agreement = data_lines(&out.join("agreement.csv"));
    assert_eq!(agreement.len(), 1 + 11);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["backend_agreement"][0]["max_rel_deviation"].as_f64().unwrap() <= 1e-6);

    let std_row = &data_lines(&out.join("rms_std.csv"))[1];
    let opt_row = &data_lines(&out.join("rms_opt.csv"))[1];
    let values = |row: &str| row.split(',').skip(5).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>();
    for (s, p) in values(std_row).iter().zip(values(opt_row)) {
        assert!((s - p).abs() <= 1e-6 * s.abs().max(1e-9), "{s} vs {p}");
    }
}

#[test]
fn equiv_reports_every_sub_step() {
    let o = bare(&["equiv", "--trials", "4", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    for step in ["feature_augment", "pose_augment", "smoothing_update", "static_feature_update", "state_propagate", "drop_variables"] {
        assert!(text.lines().any(|l| l.starts_with(step) && l.ends_with("ok")), "{step} missing:\n{text}");
    }

    let none = bare(&["equiv", "--trials", "0"]);
    assert!(none.status.success());

    let correlated = bare(&["equiv", "--trials", "3", "--correlated-object-noise"]);
    assert!(correlated.status.success(), "{}", stderr(&correlated));
    let text = String::from_utf8_lossy(&correlated.stdout);
    let pose = text.lines().find(|l| l.starts_with("pose_augment")).unwrap();
    let cols: Vec<&str> = pose.split_whitespace().collect();
    assert_eq!((cols[1], cols[2]), ("0", "3"));
}

#[test]
fn dump_covers_every_entity_and_step() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("dump");
    let o = dynslam(&["dump", "--noise", "zero"], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = data_lines(&out.join("trajectory_std.csv"));
    assert_eq!(rows[0], "step,time_s,entity,true_x_m,true_y_m,true_theta_rad,est_x_m,est_y_m,est_theta_rad");
    // Ego, 40 landmarks, 4 + 4 + 2 object points and three object poses.
    assert_eq!(rows.len() - 1, 121 * 54);

    for row in &rows[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        for k in 0..3 {
            match (cells[3 + k], cells[6 + k]) {
                ("", _) => {}
                (t, e) if !e.is_empty() => {
                    let (t, e): (f64, f64) = (t.parse().unwrap(), e.parse().unwrap());
                    assert!((t - e).abs() < 1e-6, "{row}");
                }
                _ => {}
            }
        }
    }
    let ego_last = rows.iter().find(|r| r.starts_with("120,") && r.contains(",ego,")).unwrap();
    assert!(!ego_last.ends_with(",,"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x");
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", "--noise", "4,1"],
        vec!["run", "--noise", "bogus"],
        vec!["run", "--runs", "0"],
        vec!["run", "--backend", "fast"],
        vec!["dump", "--noise", "all"],
        vec!["run", "--config", "/nonexistent/dynslam.toml"],
    ];
    for args in cases {
        assert_eq!(dynslam(&args, &out).status.code(), Some(2), "{args:?}");
    }

    let empty = dir.path().join("empty.toml");
    fs::write(&empty, "[scenario]\nduration = 0.0\n").unwrap();
    let o = dynslam(&["dump", "--config", empty.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let unknown = dir.path().join("unknown.toml");
    fs::write(&unknown, "speed = 3\n").unwrap();
    assert_eq!(dynslam(&["run", "--config", unknown.to_str().unwrap()], &out).status.code(), Some(2));

    assert_eq!(bare(&["equiv", "--tolerance", "-1"]).status.code(), Some(2));
}
