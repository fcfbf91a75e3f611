//! Experiment configuration: a JSON file merged with command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoeffConfig {
    pub name: String,
    /// Family parameters, passed through as strings.
    pub params: BTreeMap<String, serde_json::Value>,
}

impl Default for CoeffConfig {
    fn default() -> Self {
        Self {
            name: "state-lipschitz".into(),
            params: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: 1.0, steps: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub paths: usize,
    pub seed: u64,
    pub antithetic: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            paths: 10_000,
            seed: 1,
            antithetic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub degree: usize,
    pub pivots: usize,
    pub ridge: f64,
    pub implicit: bool,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            degree: 2,
            pivots: 4,
            ridge: 1e-8,
            implicit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Multiplier on Monte Carlo standard errors.
    pub k_se: f64,
    /// Relative tolerance of estimator agreement.
    pub rel: f64,
    /// Relative tolerance of sweep against closed form.
    pub oracle_rel: f64,
    /// Relative tolerance of exact restarts.
    pub restart: f64,
    /// Largest admissible type-II martingale residual ratio.
    pub martingale: f64,
    /// Picard stopping gap.
    pub picard: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            k_se: 3.0,
            rel: 0.01,
            oracle_rel: 0.02,
            restart: 1e-12,
            martingale: 0.1,
            picard: 1e-8,
        }
    }
}

/// Settings that only some subcommands read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Constant free term, used when `x0_path` is empty.
    pub x0: f64,
    pub x0_path: Vec<f64>,
    /// Second family of `compare`.
    pub coeff_b: Option<CoeffConfig>,
    pub alpha: String,
    pub beta: String,
    pub xi: String,
    pub pair: String,
    pub t: usize,
    pub s: usize,
    /// Direction of `path-derivative`; constant one when empty.
    pub eta: Vec<f64>,
    pub fd_eps: Option<f64>,
    /// `fk-check` sample points as `[path, index]`; eight spread points when empty.
    pub points: Vec<(usize, usize)>,
    pub inner_paths: usize,
    pub replicates: usize,
    pub budget: usize,
    pub max_iter: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            x0: 0.0,
            x0_path: Vec::new(),
            coeff_b: None,
            alpha: "affine-t".into(),
            beta: "exp-r".into(),
            xi: "quadratic".into(),
            pair: "full".into(),
            t: 0,
            s: 0,
            eta: Vec::new(),
            fd_eps: None,
            points: Vec::new(),
            inner_paths: 20_000,
            replicates: 8,
            budget: 10_000_000,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergeConfig {
    /// Subcommand whose error is studied.
    pub op: String,
    /// Ladder variable: `N`, `paths` or `degree`.
    pub ladder: String,
    pub values: Vec<f64>,
    /// Independent seeds per rung of a `paths` ladder.
    pub replicates: usize,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        Self {
            op: "solve-bsvie".into(),
            ladder: "N".into(),
            values: Vec::new(),
            replicates: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Subcommand; the command line wins when both are given.
    pub command: Option<String>,
    pub coeff: CoeffConfig,
    pub grid: GridConfig,
    pub mc: McConfig,
    pub basis: BasisConfig,
    pub tolerances: Tolerances,
    pub task: TaskConfig,
    pub converge: ConvergeConfig,
    pub output: PathBuf,
    /// Worker count; capped by `VOLTERRA_FK_THREADS`.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            command: None,
            coeff: CoeffConfig::default(),
            grid: GridConfig::default(),
            mc: McConfig::default(),
            basis: BasisConfig::default(),
            tolerances: Tolerances::default(),
            task: TaskConfig::default(),
            converge: ConvergeConfig::default(),
            output: PathBuf::from("volterra-out"),
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Free term on the grid.
    pub fn x0_path(&self) -> Result<Vec<f64>, CliError> {
        let n = self.grid.steps + 1;
        if self.task.x0_path.is_empty() {
            return Ok(vec![self.task.x0; n]);
        }
        if self.task.x0_path.len() != n {
            return Err(CliError::Config(format!(
                "task.x0_path has {} values, the grid has {n} nodes",
                self.task.x0_path.len()
            )));
        }
        Ok(self.task.x0_path.clone())
    }

    pub fn eta_path(&self) -> Result<Vec<f64>, CliError> {
        let n = self.grid.steps + 1;
        if self.task.eta.is_empty() {
            return Ok(vec![1.0; n]);
        }
        if self.task.eta.len() != n {
            return Err(CliError::Config(format!(
                "task.eta has {} values, the grid has {n} nodes",
                self.task.eta.len()
            )));
        }
        Ok(self.task.eta.clone())
    }

    /// Worker count after the environment cap.
    pub fn worker_count(&self) -> Result<usize, CliError> {
        let cap = match std::env::var("VOLTERRA_FK_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| CliError::Config(format!("VOLTERRA_FK_THREADS must be a positive integer, got '{v}'")))?,
            ),
            Err(_) => None,
        };
        let want = self
            .threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if want == 0 {
            return Err(CliError::Config("threads must be positive".into()));
        }
        Ok(cap.map_or(want, |c| want.min(c)))
    }
}

/// Family parameter table as the core crate expects it.
pub fn params_of(c: &CoeffConfig) -> volterra_fk::coefficients::Params {
    let mut p = volterra_fk::coefficients::Params::new();
    for (k, v) in &c.params {
        let text = match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        p = p.with(k, text);
    }
    p
}

/// Parses `key=value` pairs from `--param`.
pub fn parse_param(s: &str) -> Result<(String, serde_json::Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got '{s}'"))?;
    let value = v
        .parse::<f64>()
        .ok()
        .and_then(serde_json::Number::from_f64)
        .map_or_else(|| serde_json::Value::String(v.to_string()), serde_json::Value::Number);
    Ok((k.trim().to_string(), value))
}
