//! `dynslam`: Monte Carlo runs, trajectory dumps and the backend
//! equivalence suite.

mod config;
mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynslam_core::equivalence::{run_equivalence, EquivalenceConfig};
use dynslam_core::sim::{
    build_scenario, compare_backends, run_filter, run_inputs, run_monte_carlo, MonteCarloReport, NoiseLevel, Scenario,
};
use serde_json::json;
use thiserror::Error;

use config::{BackendChoice, NoiseSelection, RunConfig, Toggle};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Numeric failure or a failed check; exit code 1.
    #[error("{0}")]
    Failure(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) | CliError::Io { .. } => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dynslam", version, about = "Dynamic EKF SLAM experiments on a simulated highway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo runs; writes RMS tables and a manifest.
    Run(RunArgs),
    /// Randomized sub-step equivalence between the two backends.
    Equiv(EquivArgs),
    /// Truth and estimate trajectories of a single run.
    Dump(DumpArgs),
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `i,j` (levels 1-3), `all` or `zero`.
    #[arg(long)]
    noise: Option<NoiseSelection>,
    /// Seed of the simulated sensor and odometry noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the landmark layout.
    #[arg(long)]
    scenario_seed: Option<u64>,
    #[arg(long, value_enum)]
    backend: Option<BackendChoice>,
    /// Keep only the three most recent poses per object.
    #[arg(long, value_enum)]
    drop_history: Option<Toggle>,
    /// Constant-velocity smoothing of object poses.
    #[arg(long, value_enum)]
    smoothing: Option<Toggle>,
    /// Output directory.
    #[arg(long, env = "DYNSLAM_OUT", default_value = "dynslam-out")]
    out: PathBuf,
}

impl ExperimentArgs {
    fn resolve(&self, runs: Option<usize>) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.noise {
            c.noise = v.clone();
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.scenario_seed {
            c.scenario_seed = v;
        }
        if let Some(v) = self.backend {
            c.backend = v;
        }
        if let Some(v) = self.drop_history {
            c.drop_history = v.enabled();
        }
        if let Some(v) = self.smoothing {
            c.smoothing = v.enabled();
        }
        if let Some(v) = runs {
            c.runs = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: ExperimentArgs,
    /// Monte Carlo runs per noise level.
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Debug, Args)]
struct DumpArgs {
    #[command(flatten)]
    common: ExperimentArgs,
    /// Index of the run to dump (its noise stream).
    #[arg(long, default_value_t = 0)]
    run: usize,
}

#[derive(Debug, Args)]
struct EquivArgs {
    /// Seed of the random trial states.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Relative tolerance on means and covariances.
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
    /// Correlate the object-motion noise axes; pose augmentation is then
    /// reported as skipped.
    #[arg(long)]
    correlated_object_noise: bool,
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.to_owned(), source })
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_owned(), source })
}

fn scenario(config: &RunConfig) -> Result<Scenario, CliError> {
    build_scenario(&config.scenario, config.scenario_seed).map_err(|e| CliError::Usage(e.to_string()))
}

fn cell_summary(r: &MonteCarloReport) -> serde_json::Value {
    json!({
        "noise": r.level.to_string(),
        "backend": r.backend.short_name(),
        "runs": r.runs,
        "failures": r.failures,
        "psd_violations": r.psd_violations,
        "mean_step_ms": r.mean_step_time * 1e3,
        "max_step_ms": r.max_step_time * 1e3,
        "mean_run_ms": r.mean_run_time * 1e3,
        "mean_ego_nees": r.mean_nees,
    })
}

/// Largest tolerated deviation between the backends' per-step beliefs.
const AGREEMENT_TOLERANCE: f64 = 1e-6;

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let config = args.common.resolve(args.runs)?;
    let scenario = scenario(&config)?;
    let mc = config.monte_carlo();
    let out = &args.common.out;
    prepare_out(out)?;

    let mut reports = Vec::new();
    for backend in config.backend.kinds() {
        for level in config.noise.levels() {
            let r = run_monte_carlo(&scenario, &mc, level, backend).map_err(|e| CliError::Failure(e.to_string()))?;
            eprintln!(
                "{backend} noise {level}: ego x {:.3e} m, {:.3} ms/step, {} failed runs",
                r.rms.get(dynslam_core::sim::EntityGroup::EgoPoses).map_or(f64::NAN, |g| g.x),
                r.mean_step_time * 1e3,
                r.failures.len()
            );
            reports.push(r);
        }
    }

    let mut files = vec!["config.toml".to_string()];
    write(&out.join("config.toml"), &config.to_toml())?;
    for backend in config.backend.kinds() {
        let name = format!("rms_{}.csv", backend.short_name());
        let mine: Vec<&MonteCarloReport> = reports.iter().filter(|r| r.backend == backend).collect();
        write(&out.join(&name), &output::rms_table(&scenario, &config, &mine))?;
        files.push(name);
    }

    let mut agreement = Vec::new();
    if config.backend == BackendChoice::Both {
        let mut csv = output::header("run", &config);
        csv.push_str("noise,step,mean_rel_after_update,cov_rel_after_update,mean_rel_after_propagate,cov_rel_after_propagate\n");
        for level in config.noise.levels() {
            let inputs = run_inputs(&scenario, level, config.seed, 0).map_err(|e| CliError::Failure(e.to_string()))?;
            let cmp = compare_backends(mc.filter_config(level).map_err(|e| CliError::Usage(e.to_string()))?, &inputs)
                .map_err(|e| CliError::Failure(e.to_string()))?;
            for s in &cmp.steps {
                csv.push_str(&format!(
                    "\"{level}\",{},{},{},{},{}\n",
                    s.step, s.mean_after_update, s.cov_after_update, s.mean_after_propagate, s.cov_after_propagate
                ));
            }
            agreement.push((level, cmp.max_deviation()));
        }
        write(&out.join("agreement.csv"), &csv)?;
        files.push("agreement.csv".into());
    }

    let manifest = json!({
        "tool": "dynslam",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "run",
        "seed": config.seed,
        "scenario_seed": config.scenario_seed,
        "config": config,
        "files": files,
        "cells": reports.iter().map(cell_summary).collect::<Vec<_>>(),
        "backend_agreement": agreement
            .iter()
            .map(|(l, d)| json!({ "noise": l.to_string(), "max_rel_deviation": d, "run": 0 }))
            .collect::<Vec<_>>(),
    });
    write(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;

    let mut problems = Vec::new();
    for r in &reports {
        for f in &r.failures {
            problems.push(format!("{} noise {} run {}: {}", r.backend, r.level, f.run, f.error));
        }
        if r.psd_violations > 0 {
            problems.push(format!("{} noise {}: {} unhealthy covariance snapshots", r.backend, r.level, r.psd_violations));
        }
    }
    for (level, d) in &agreement {
        if *d > AGREEMENT_TOLERANCE {
            problems.push(format!("noise {level}: backends disagree by {d:.3e} (tolerance {AGREEMENT_TOLERANCE:e})"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failure(problems.join("\n")))
    }
}

fn cmd_dump(args: &DumpArgs) -> Result<(), CliError> {
    let config = args.common.resolve(None)?;
    let levels = config.noise.levels();
    let level: NoiseLevel = match levels.as_slice() {
        [l] => *l,
        _ => return Err(CliError::Usage("dump needs a single noise level (`i,j` or `zero`)".into())),
    };
    let scenario = scenario(&config)?;
    let mc = config.monte_carlo();
    let filter = mc.filter_config(level).map_err(|e| CliError::Usage(e.to_string()))?;
    let inputs = run_inputs(&scenario, level, config.seed, args.run).map_err(|e| CliError::Failure(e.to_string()))?;
    let out = &args.common.out;
    prepare_out(out)?;
    let mut files = vec!["config.toml".to_string()];
    write(&out.join("config.toml"), &config.to_toml())?;
    for backend in config.backend.kinds() {
        let result = run_filter(backend, filter.clone(), &scenario, &inputs)
            .map_err(|e| CliError::Failure(format!("{backend} run {}: {e}", args.run)))?;
        let name = format!("trajectory_{}.csv", backend.short_name());
        write(&out.join(&name), &output::trajectory_table(&scenario, &config, &result.estimates))?;
        files.push(name);
    }
    let manifest = json!({
        "tool": "dynslam",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "dump",
        "run": args.run,
        "noise": level.to_string(),
        "seed": config.seed,
        "scenario_seed": config.scenario_seed,
        "config": config,
        "files": files,
    });
    write(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
}

fn cmd_equiv(args: &EquivArgs) -> Result<(), CliError> {
    if !(args.tolerance.is_finite() && args.tolerance > 0.0) {
        return Err(CliError::Usage("--tolerance must be positive".into()));
    }
    let config = EquivalenceConfig {
        seed: args.seed,
        trials: args.trials,
        tolerance: args.tolerance,
        correlated_object_noise: args.correlated_object_noise,
    };
    let report = run_equivalence(&config);
    println!("{:<24}{:>8}{:>8}{:>14}{:>14}  status", "sub-step", "checked", "skipped", "mean_rel", "cov_rel");
    for s in &report.steps {
        let status = if s.passed(config.tolerance) { "ok" } else { "FAIL" };
        println!(
            "{:<24}{:>8}{:>8}{:>14.3e}{:>14.3e}  {status}",
            s.step.to_string(),
            s.checked,
            s.skipped,
            s.max_mean_deviation,
            s.max_cov_deviation
        );
    }
    let failed: Vec<String> = report
        .steps
        .iter()
        .filter(|s| !s.passed(config.tolerance))
        .map(|s| {
            let first_error = s.errors.first().map(|(t, e)| format!("; trial {t}: {e}")).unwrap_or_default();
            format!(
                "{}: max deviation {:.3e} (trial {:?}){first_error}",
                s.step,
                s.max_deviation(),
                s.worst_trial
            )
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failure(format!("equivalence check failed:\n{}", failed.join("\n"))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Equiv(a) => cmd_equiv(a),
        Command::Dump(a) => cmd_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
