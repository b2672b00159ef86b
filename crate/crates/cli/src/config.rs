//! Experiment configuration files.
//!
//! Each subcommand reads one record, from TOML (`.toml`) or JSON (anything
//! else). Unknown keys are rejected and `schema_version` must match.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use stomech::noise::check_no_jumps;
use stomech::pde::{AnalyticFamily, Boundary, Direction, FamilyParams};
use stomech::{DiffusionSpec, SpaceGrid, TimeGrid};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Diffusion parameters as written in a config file.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConfig {
    pub alpha_mag: f64,
    pub phi: f64,
    #[serde(default = "one")]
    pub mass: f64,
    #[serde(default = "one")]
    pub hbar: f64,
    #[serde(default)]
    pub charge: f64,
    /// Jump intensity; anything but zero is refused.
    #[serde(default)]
    pub beta: f64,
}

fn one() -> f64 {
    1.0
}

impl SpecConfig {
    pub fn build(&self) -> Result<DiffusionSpec, CliError> {
        check_no_jumps(self.beta).map_err(CliError::config)?;
        DiffusionSpec::new(self.alpha_mag, self.phi)
            .with_mass(self.mass)
            .with_hbar(self.hbar)
            .with_charge(self.charge)
            .validate()
            .map_err(CliError::config)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub spec: SpecConfig,
    pub time: TimeGrid,
    #[serde(default = "one_usize")]
    pub dim: usize,
    pub n_paths: usize,
    /// Paths written to the NDJSON file; all of them by default.
    #[serde(default)]
    pub write_paths: Option<usize>,
    #[serde(default = "default_significance")]
    pub significance: f64,
}

fn one_usize() -> usize {
    1
}

fn default_significance() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialChoice {
    /// The potential the analytic family is a solution for.
    #[default]
    Family,
    Zero,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub spec: SpecConfig,
    pub time: TimeGrid,
    pub grid: SpaceGrid,
    /// Analytic family providing the initial (or terminal) slice.
    pub family: String,
    #[serde(default)]
    pub params: FamilyParams,
    #[serde(default)]
    pub potential: PotentialChoice,
    #[serde(default = "forward")]
    pub direction: Direction,
    #[serde(default = "dirichlet")]
    pub boundary: Boundary,
    #[serde(default = "one_usize")]
    pub stride: usize,
}

fn forward() -> Direction {
    Direction::Forward
}

fn dirichlet() -> Boundary {
    Boundary::Dirichlet
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    /// Closed-form solution of the family.
    #[default]
    Analytic,
    /// Crank-Nicolson solution started from the family at `t0`.
    Solver,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrespondConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub spec: SpecConfig,
    pub time: TimeGrid,
    pub grid: SpaceGrid,
    pub family: String,
    #[serde(default)]
    pub params: FamilyParams,
    #[serde(default)]
    pub source: FieldSource,
    pub n_paths: usize,
    /// Steps between density checkpoints; must divide `time.n_steps`.
    pub record_stride: usize,
    /// Histogram grid for the density comparison.
    pub comparison: SpaceGrid,
    /// Fringe table; on by default for the double slit.
    #[serde(default)]
    pub fringes: Option<bool>,
    #[serde(default = "default_fringe_fraction")]
    pub fringe_min_fraction: f64,
}

fn default_fringe_fraction() -> f64 {
    0.1
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<u32>,
}

/// Reads and parses a config, checking the schema version before the body
/// so that an old file gets a version message rather than a key error.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let toml = path.extension().is_some_and(|e| e == "toml");
    let probe: Result<VersionProbe, String> = if toml {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    match probe {
        Ok(VersionProbe { schema_version: Some(v) }) if v != SCHEMA_VERSION => {
            return Err(CliError::Config(format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})")));
        }
        Ok(VersionProbe { schema_version: None }) => {
            return Err(CliError::Config("missing `schema_version`".into()));
        }
        _ => {}
    }
    let parsed = if toml {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn time_grid(t: &TimeGrid) -> Result<TimeGrid, CliError> {
    TimeGrid::new(t.t0, t.tf, t.n_steps).map_err(CliError::config)
}

pub fn space_grid(g: &SpaceGrid) -> Result<SpaceGrid, CliError> {
    SpaceGrid::new(g.axes.clone()).map_err(CliError::config)
}

pub fn family(name: &str, params: &FamilyParams, spec: &DiffusionSpec, dim: usize) -> Result<AnalyticFamily, CliError> {
    let fam = AnalyticFamily::from_name(name, params, dim).map_err(CliError::config)?;
    fam.check(spec, dim).map_err(CliError::config)?;
    Ok(fam)
}

pub fn positive(name: &str, n: usize) -> Result<usize, CliError> {
    if n == 0 {
        return Err(CliError::Config(format!("`{name}` must be positive")));
    }
    Ok(n)
}
