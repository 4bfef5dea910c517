//! Effective run configuration: defaults, optional TOML file, then flags.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use clap::ValueEnum;
use dynslam_core::sim::{BackendKind, MonteCarloConfig, NoiseLevel, ScenarioConfig};
use dynslam_core::FilterConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// `i,j` for one grid cell, `all` for the 3×3 grid, or `zero` for noise-free data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NoiseSelection {
    Level(u8, u8),
    All,
    Zero,
}

impl NoiseSelection {
    pub fn levels(&self) -> Vec<NoiseLevel> {
        match *self {
            NoiseSelection::Level(process, measurement) => vec![NoiseLevel::Grid { process, measurement }],
            NoiseSelection::All => NoiseLevel::grid(),
            NoiseSelection::Zero => vec![NoiseLevel::Zero],
        }
    }
}

impl FromStr for NoiseSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "all" => return Ok(NoiseSelection::All),
            "zero" => return Ok(NoiseSelection::Zero),
            _ => {}
        }
        let parse = |p: &str| p.trim().parse::<u8>().ok().filter(|v| (1..=3).contains(v));
        match s.split_once(',') {
            Some((i, j)) => match (parse(i), parse(j)) {
                (Some(i), Some(j)) => Ok(NoiseSelection::Level(i, j)),
                _ => Err(format!("noise levels must be in 1..=3, got `{s}`")),
            },
            None => Err(format!("expected `i,j`, `all` or `zero`, got `{s}`")),
        }
    }
}

impl TryFrom<String> for NoiseSelection {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<NoiseSelection> for String {
    fn from(n: NoiseSelection) -> Self {
        n.to_string()
    }
}

impl fmt::Display for NoiseSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseSelection::Level(i, j) => write!(f, "{i},{j}"),
            NoiseSelection::All => f.write_str("all"),
            NoiseSelection::Zero => f.write_str("zero"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Std,
    Opt,
    Both,
}

impl BackendChoice {
    pub fn kinds(&self) -> Vec<BackendKind> {
        match self {
            BackendChoice::Std => vec![BackendKind::Standard],
            BackendChoice::Opt => vec![BackendKind::Optimization],
            BackendChoice::Both => BackendKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    pub fn enabled(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Monte Carlo root seed.
    pub seed: u64,
    /// Seed of the landmark layout.
    pub scenario_seed: u64,
    pub runs: usize,
    pub noise: NoiseSelection,
    pub backend: BackendChoice,
    pub drop_history: bool,
    pub smoothing: bool,
    pub scenario: ScenarioConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenario_seed: 0,
            runs: 25,
            noise: NoiseSelection::Level(1, 1),
            backend: BackendChoice::Std,
            drop_history: true,
            smoothing: false,
            scenario: ScenarioConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.runs == 0 {
            return Err(CliError::Usage("--runs must be at least 1".into()));
        }
        self.scenario.validate().map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn monte_carlo(&self) -> MonteCarloConfig {
        MonteCarloConfig {
            seed: self.seed,
            runs: self.runs,
            filter: FilterConfig { drop_object_history: self.drop_history, smoothing: self.smoothing, ..FilterConfig::default() },
        }
    }
}
