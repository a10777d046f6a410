//! Experiment configuration: a TOML document with `[model]`, `[grid]`,
//! `[run]`, `[init]`, `[solver]` and optional `[sweep]` sections.
//!
//! ```toml
//! [model]
//! n_agents = 100
//! dim = 1
//! target = [0.5]
//! gamma = 0.1
//! kernel = "quadratic"      # quadratic | absolute | zero
//! # kernel_bound = 1.0      # default: max pairwise kernel value at t0
//!
//! [grid]
//! t0 = 0.0
//! t_final = 5.0
//! h = 0.01
//!
//! [run]
//! mode = "cheap"            # uncontrolled | cheap | optimal
//! beta = 3.0
//! lambda = 0.5
//! seed = 0
//! output_dir = "out"
//!
//! [init]
//! distribution = "uniform"
//! low = 0.0
//! high = 1.0
//!
//! [sweep]
//! parameter = "h"           # beta | h | n_agents
//! values = [0.1, 0.01, 0.001]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InteractionKernel, TimeGrid};
use crate::solver::SolverConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_agents: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub target: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub kernel: InteractionKernel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default)]
    pub t0: f64,
    pub t_final: f64,
    pub h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Uncontrolled,
    Cheap,
    Optimal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub lambda: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Also write one column per agent and dimension (`agents.csv`).
    pub per_agent: bool,
    /// Controls CSV used to warm-start the optimal solve.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<PathBuf>,
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            mode: Mode::Optimal,
            beta: None,
            lambda: 0.5,
            seed: 0,
            output_dir: PathBuf::from("out"),
            per_agent: false,
            warm_start: None,
            workers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    pub distribution: Distribution,
    pub low: f64,
    pub high: f64,
}

impl Default for InitSection {
    fn default() -> Self {
        InitSection {
            distribution: Distribution::Uniform,
            low: 0.0,
            high: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Beta,
    H,
    NAgents,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Beta => "beta",
            SweepParameter::H => "h",
            SweepParameter::NAgents => "n_agents",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

fn default_dim() -> usize {
    1
}

fn default_gamma() -> f64 {
    0.1
}

/// Gain used for the certificate constants when `run.beta` is absent.
pub const DEFAULT_CERTIFICATE_BETA: f64 = 3.0;

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_str_with_overrides(text, &[])
    }

    /// Parses `text`, applies `section.key=value` overrides and validates.
    pub fn from_toml_str_with_overrides(
        text: &str,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.t0, self.grid.t_final, self.grid.h)
            .map_err(|e| Error::config("grid.h", e.to_string()))
    }

    /// Gain for the constants ledger: `run.beta`, else 3 clipped below `1/h`.
    pub fn certificate_beta(&self) -> f64 {
        self.run.beta.unwrap_or_else(|| {
            let h = self.grid.h;
            if DEFAULT_CERTIFICATE_BETA * h < 1.0 {
                DEFAULT_CERTIFICATE_BETA
            } else {
                0.5 / h
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.n_agents == 0 {
            return Err(Error::config("model.n_agents", "must be at least 1"));
        }
        if m.dim == 0 {
            return Err(Error::config("model.dim", "must be at least 1"));
        }
        if m.target.len() != m.dim {
            return Err(Error::config(
                "model.target",
                format!("has {} entries, expected dim={}", m.target.len(), m.dim),
            ));
        }
        if m.target.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("model.target", "must be finite"));
        }
        if !(m.gamma > 0.0 && m.gamma.is_finite()) {
            return Err(Error::config("model.gamma", "must be positive"));
        }
        if let Some(b) = m.kernel_bound {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::config(
                    "model.kernel_bound",
                    "must be finite and nonnegative",
                ));
            }
        }
        let grid = self.grid()?;
        if let Some(beta) = self.run.beta {
            check_beta(beta, grid.h())?;
        } else if self.run.mode == Mode::Cheap {
            return Err(Error::config(
                "run.beta",
                "cheap mode needs a feedback gain `beta`",
            ));
        }
        if !(self.run.lambda > 0.0 && self.run.lambda < 1.0) {
            return Err(Error::config("run.lambda", "must lie in (0, 1)"));
        }
        if self.run.workers == 0 {
            return Err(Error::config("run.workers", "must be at least 1"));
        }
        if !(self.init.low < self.init.high)
            || !self.init.low.is_finite()
            || !self.init.high.is_finite()
        {
            return Err(Error::config(
                "init.low",
                "uniform init needs finite low < high",
            ));
        }
        self.solver
            .validate()
            .map_err(|e| Error::config("solver", e.to_string()))?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(Error::config("sweep.values", "sweep list is empty"));
            }
            for &v in &sweep.values {
                self.with_sweep_value(sweep.parameter, v)?;
            }
        }
        Ok(())
    }

    /// Copy of this config with one sweep override applied and validated.
    pub fn with_sweep_value(
        &self,
        parameter: SweepParameter,
        value: f64,
    ) -> Result<ExperimentConfig> {
        let mut cfg = self.clone();
        cfg.sweep = None;
        match parameter {
            SweepParameter::Beta => cfg.run.beta = Some(value),
            SweepParameter::H => cfg.grid.h = value,
            SweepParameter::NAgents => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::config(
                        "sweep.values",
                        format!("n_agents must be a positive integer, got {value}"),
                    ));
                }
                cfg.model.n_agents = value as usize;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_beta(beta: f64, h: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config("run.beta", "must be positive"));
    }
    if h * beta >= 1.0 {
        return Err(Error::config(
            "run.beta",
            format!("h*beta = {} must be strictly below 1", h * beta),
        ));
    }
    Ok(())
}

/// Sets `dotted.key` to `raw`, parsed as a TOML value when possible and as a
/// plain string otherwise.
fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::config(key, "override key must be non-empty"))?;
    let mut cursor = table;
    for p in parts {
        let entry = cursor
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    load_config_with_overrides(path, &[])
}

pub fn load_config_with_overrides(
    path: &Path,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_toml_str_with_overrides(&text, overrides)
}
