//! Named, reproducible experiments with declared thresholds and verdicts.

mod config;
mod stabilization;
mod trees;
mod walks;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bpre::Strategy;
use crate::environment::EnvironmentSpec;
use crate::error::{Error, Result};
use crate::parallel::MonteCarlo;
use crate::stats::Estimate;

pub use config::{RunConfig, Thresholds, CONFIG_SCHEMA_VERSION};
pub use stabilization::{run_e1, run_e1_e2, run_e2, run_stabilization, StabilizationParams};
pub use trees::{run_e4, run_e8, E4Params, E8Params};
pub use walks::{run_e3, run_e5, run_e6, run_e7, E3Params, E5Params, E6Params, E7Params};

pub const RESULT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    E1,
    E2,
    E3,
    E4,
    E5,
    E6,
    E7,
    E8,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 8] = [
        ExperimentId::E1,
        ExperimentId::E2,
        ExperimentId::E3,
        ExperimentId::E4,
        ExperimentId::E5,
        ExperimentId::E6,
        ExperimentId::E7,
        ExperimentId::E8,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ExperimentId::E1 => "e1",
            ExperimentId::E2 => "e2",
            ExperimentId::E3 => "e3",
            ExperimentId::E4 => "e4",
            ExperimentId::E5 => "e5",
            ExperimentId::E6 => "e6",
            ExperimentId::E7 => "e7",
            ExperimentId::E8 => "e8",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            ExperimentId::E1 => "stabilization of the law of Z at the running minimum given survival",
            ExperimentId::E2 => "stabilization of the rescaled population at generation r given survival",
            ExperimentId::E3 => "product structure of the environment around the minimum",
            ExperimentId::E4 => "positivity of the spine martingale limit under stay-nonnegative environments",
            ExperimentId::E5 => "duality of min-at-end and stay-negative events; arcsine law of the minimum position",
            ExperimentId::E6 => "harmonicity of the renewal functions",
            ExperimentId::E7 => "two-walk overshoot probability along a growing schedule",
            ExperimentId::E8 => "environment functional under survival versus the spine given min at end",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|id| id.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownExperiment(s.to_string()))
    }
}

/// Parses `all` or a comma-separated list of ids.
pub fn parse_experiment_list(s: &str) -> Result<Vec<ExperimentId>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(ExperimentId::ALL.to_vec());
    }
    s.split(',').map(|p| p.trim().parse()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Inconclusive,
    Fail,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Fail => 2,
            Verdict::Inconclusive => 3,
        }
    }

    /// Fail dominates inconclusive, which dominates pass.
    pub fn combine(verdicts: impl IntoIterator<Item = Verdict>) -> Verdict {
        verdicts.into_iter().max().unwrap_or(Verdict::Pass)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Inconclusive => "inconclusive",
            Verdict::Fail => "fail",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub value: f64,
    pub stderr: f64,
    pub exact: bool,
}

impl Statistic {
    pub fn exact(value: f64) -> Self {
        Statistic {
            value,
            stderr: 0.0,
            exact: true,
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.value, self.stderr)
    }
}

impl From<Estimate> for Statistic {
    fn from(e: Estimate) -> Self {
        Statistic {
            value: e.value,
            stderr: e.stderr,
            exact: false,
        }
    }
}

/// One thresholded comparison that feeds the verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub verdict: Verdict,
    pub detail: String,
}

/// Resolved inputs of one experiment run, enough to rerun it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub id: ExperimentId,
    pub spec: EnvironmentSpec,
    pub seed: u64,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub thresholds: Thresholds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub id: ExperimentId,
    pub title: String,
    pub manifest: Manifest,
    pub statistics: BTreeMap<String, Statistic>,
    pub checks: Vec<Check>,
    pub verdict: Verdict,
    pub notes: Vec<String>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

impl ExperimentResult {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Accumulates statistics, checks and artifacts while an experiment runs.
pub(crate) struct Report {
    id: ExperimentId,
    manifest: Manifest,
    statistics: BTreeMap<String, Statistic>,
    checks: Vec<Check>,
    notes: Vec<String>,
    artifacts: Vec<String>,
    out: Option<PathBuf>,
}

impl Report {
    pub(crate) fn new(
        id: ExperimentId,
        spec: &EnvironmentSpec,
        seed: u64,
        parameters: serde_json::Value,
        thresholds: &Thresholds,
        out: Option<&Path>,
    ) -> Result<Self> {
        let parameters = match parameters {
            serde_json::Value::Object(map) => map.into_iter().collect(),
            other => BTreeMap::from([("value".to_string(), other)]),
        };
        let out = match out {
            Some(root) => {
                let dir = root.join(id.label());
                std::fs::create_dir_all(&dir)?;
                Some(root.to_path_buf())
            }
            None => None,
        };
        Ok(Report {
            id,
            manifest: Manifest {
                id,
                spec: spec.clone(),
                seed,
                parameters,
                thresholds: thresholds.clone(),
            },
            statistics: BTreeMap::new(),
            checks: Vec::new(),
            notes: Vec::new(),
            artifacts: Vec::new(),
            out,
        })
    }

    pub(crate) fn stat(&mut self, name: impl Into<String>, s: impl Into<Statistic>) {
        self.statistics.insert(name.into(), s.into());
    }

    pub(crate) fn exact(&mut self, name: impl Into<String>, value: f64) {
        self.statistics.insert(name.into(), Statistic::exact(value));
    }

    pub(crate) fn check(
        &mut self,
        name: impl Into<String>,
        verdict: Verdict,
        detail: impl Into<String>,
    ) {
        self.checks.push(Check {
            name: name.into(),
            verdict,
            detail: detail.into(),
        });
    }

    /// Pass when `ok`, otherwise fail.
    pub(crate) fn require(&mut self, name: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.check(name, if ok { Verdict::Pass } else { Verdict::Fail }, detail);
    }

    pub(crate) fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    /// Writes a CSV under `<run>/<id>/<name>` when an output directory is set.
    pub(crate) fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let Some(root) = &self.out else {
            return Ok(());
        };
        let rel = format!("{}/{}", self.id.label(), name);
        let mut w = csv::Writer::from_path(root.join(&rel))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        self.artifacts.push(rel);
        Ok(())
    }

    /// Runs `write` on `<run>/<id>/<name>` when an output directory is set.
    pub(crate) fn file(
        &mut self,
        name: &str,
        write: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<()> {
        let Some(root) = &self.out else {
            return Ok(());
        };
        let rel = format!("{}/{}", self.id.label(), name);
        write(&root.join(&rel))?;
        self.artifacts.push(rel);
        Ok(())
    }

    pub(crate) fn finish(self) -> ExperimentResult {
        let verdict = Verdict::combine(self.checks.iter().map(|c| c.verdict));
        ExperimentResult {
            schema_version: RESULT_SCHEMA_VERSION,
            id: self.id,
            title: self.id.title().to_string(),
            manifest: self.manifest,
            statistics: self.statistics,
            checks: self.checks,
            verdict,
            notes: self.notes,
            artifacts: self.artifacts,
        }
    }
}

pub(crate) fn fmt_estimate(e: &Estimate) -> String {
    format!("{:.6} ± {:.6}", e.value, e.stderr)
}

/// `⌈√n⌉`.
pub fn ceil_sqrt(n: usize) -> usize {
    crate::bpre::default_r(n)
}

/// Runs one experiment with the resolved settings of `cfg`. Artifacts go
/// under `out/<id>/` when `out` is given.
pub fn run_experiment(
    id: ExperimentId,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<ExperimentResult> {
    let mc = MonteCarlo::new(cfg.seed).with_workers(cfg.workers);
    let spec = &cfg.spec;
    let th = &cfg.thresholds;
    match id {
        ExperimentId::E1 => run_e1(spec, &StabilizationParams::resolve(cfg), th, &mc, out),
        ExperimentId::E2 => run_e2(spec, &StabilizationParams::resolve(cfg), th, &mc, out),
        ExperimentId::E3 => run_e3(spec, &E3Params::resolve(cfg), th, &mc, out),
        ExperimentId::E4 => run_e4(spec, &E4Params::resolve(cfg), th, &mc, out),
        ExperimentId::E5 => run_e5(spec, &E5Params::resolve(cfg), th, &mc, out),
        ExperimentId::E6 => run_e6(spec, &E6Params::resolve(cfg), th, &mc, out),
        ExperimentId::E7 => run_e7(spec, &E7Params::resolve(cfg), th, &mc, out),
        ExperimentId::E8 => run_e8(spec, &E8Params::resolve(cfg), th, &mc, out),
    }
}

pub(crate) fn default_strategy() -> Strategy {
    Strategy::TiltedRaoBlackwell
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_parse() {
        assert_eq!("E5".parse::<ExperimentId>().unwrap(), ExperimentId::E5);
        assert_eq!(parse_experiment_list("all").unwrap().len(), 8);
        assert_eq!(
            parse_experiment_list("e1, e7").unwrap(),
            vec![ExperimentId::E1, ExperimentId::E7]
        );
        assert!(matches!(
            "e9".parse::<ExperimentId>(),
            Err(Error::UnknownExperiment(_))
        ));
    }

    #[test]
    fn verdicts_combine() {
        assert_eq!(Verdict::combine([]), Verdict::Pass);
        assert_eq!(
            Verdict::combine([Verdict::Pass, Verdict::Inconclusive]),
            Verdict::Inconclusive
        );
        assert_eq!(
            Verdict::combine([Verdict::Fail, Verdict::Inconclusive]),
            Verdict::Fail
        );
        assert_eq!(Verdict::Fail.exit_code(), 2);
    }
}
