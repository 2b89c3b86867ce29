use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{default_strategy, ExperimentId};
use crate::bpre::Strategy;
use crate::environment::EnvironmentSpec;
use crate::error::{Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Pass/fail thresholds. Every field has a default, so a threshold file
/// only lists the values it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Multiple of the standard error used by every agreement check.
    pub sigma_k: f64,
    /// Below `min_ess_fraction * N` a stabilization check is inconclusive.
    pub min_ess_fraction: f64,
    /// Atoms lighter than this are lumped into a tail atom for TV distances.
    pub tv_min_mass: f64,
    pub e1_tv_final: f64,
    pub e2_ks_final: f64,
    pub e2_near_zero_delta: f64,
    pub e2_near_zero_mass: f64,
    pub e3_ks: f64,
    pub e4_small_terminal: f64,
    pub e4_small_fraction: f64,
    pub e5_arcsine_ks: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            sigma_k: 3.0,
            min_ess_fraction: 0.01,
            tv_min_mass: 1e-3,
            e1_tv_final: 0.1,
            e2_ks_final: 0.1,
            e2_near_zero_delta: 0.01,
            e2_near_zero_mass: 0.05,
            e3_ks: 0.05,
            e4_small_terminal: 1e-3,
            e4_small_fraction: 0.01,
            e5_arcsine_ks: 0.02,
        }
    }
}

impl Thresholds {
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_error(origin, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?, &path.display().to_string())
    }
}

fn default_spec() -> EnvironmentSpec {
    EnvironmentSpec::calibrate_lognormal(1.0).expect("sigma2 = 1 is valid")
}

fn default_workers() -> usize {
    1
}

fn default_schema() -> u32 {
    CONFIG_SCHEMA_VERSION
}

/// Everything a run needs. Generic overrides (`n`, `r`, `samples`) are
/// interpreted per experiment; unset values fall back to each experiment's
/// defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default = "default_spec")]
    pub spec: EnvironmentSpec,
    #[serde(default)]
    pub experiments: Vec<ExperimentId>,
    pub seed: u64,
    /// Affects wall time only.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl RunConfig {
    pub fn new(spec: EnvironmentSpec, seed: u64) -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            spec,
            experiments: Vec::new(),
            seed,
            workers: 1,
            n: None,
            r: None,
            samples: None,
            strategy: default_strategy(),
            out: None,
            thresholds: Thresholds::default(),
        }
    }

    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_error(origin, e))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config {
                origin: origin.to_string(),
                message: format!(
                    "field `schema_version`: unsupported version {}",
                    cfg.schema_version
                ),
            });
        }
        if cfg.workers == 0 {
            return Err(Error::Config {
                origin: origin.to_string(),
                message: "field `workers`: must be at least 1".into(),
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

fn config_error(origin: &str, e: serde_json::Error) -> Error {
    Error::Config {
        origin: origin.to_string(),
        message: format!("line {}, column {}: {}", e.line(), e.column(), e),
    }
}
