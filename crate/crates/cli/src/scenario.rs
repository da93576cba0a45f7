//! Scenario files: one JSON document per run, with kernel and drift tables
//! referenced as CSV paths relative to the document.

use std::fs;
use std::path::{Path, PathBuf};

use expdelay_core::kernel::read_vector_csv;
use expdelay_core::{DelayMap, DelaySpec, ExampleParams, Kernel, MarketSpec, TimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MIN_STEPS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarketConfig {
    /// `X_t = B_t + tZ`, `Z ~ N(mu, sigma2)`, on `[0, 1]`.
    Example { mu: f64, sigma2: f64 },
    /// `ã` as a vector CSV and `f̃` as an `N × N` CSV.
    Tabulated { a_tilde: PathBuf, f_tilde: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_perturbations")]
    pub n_perturbations: usize,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_perturbations() -> usize {
    20
}

fn default_outputs() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub market: MarketConfig,
    #[serde(rename = "horizon_T")]
    pub horizon: f64,
    pub n_steps: usize,
    pub delay: DelaySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McConfig>,
    #[serde(default = "default_outputs")]
    pub outputs: PathBuf,
}

/// Grid parameters and scenario hash attached to every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub scenario_hash: String,
    #[serde(rename = "horizon_T")]
    pub horizon: f64,
    pub n_steps: usize,
    pub step: f64,
}

/// A validated scenario with its tables loaded.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub base_dir: PathBuf,
    tables: Option<(Vec<f64>, Kernel)>,
    table_bytes: Vec<u8>,
    hash: String,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_steps < MIN_STEPS {
            return Err(CliError::Validation(format!(
                "n_steps must be at least {MIN_STEPS}, got {}",
                self.n_steps
            )));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(CliError::Validation(format!("horizon_T must be positive, got {}", self.horizon)));
        }
        if let MarketConfig::Example { mu, sigma2 } = self.market {
            if (self.horizon - 1.0).abs() > 1e-12 {
                return Err(CliError::Validation(format!(
                    "the example market is defined on [0, 1]; horizon_T = {}",
                    self.horizon
                )));
            }
            ExampleParams::new(mu, sigma2, None)?;
        }
        if let Some(mc) = &self.mc {
            if mc.n_paths < 1 {
                return Err(CliError::Validation("mc.n_paths must be at least 1".into()));
            }
            if !(mc.alpha.is_finite() && mc.alpha > 0.0) {
                return Err(CliError::Validation(format!("mc.alpha must be positive, got {}", mc.alpha)));
            }
        }
        Ok(())
    }
}

impl LoadedScenario {
    /// Reads, validates and hashes a scenario; `seed` overrides `mc.seed`.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let mut scenario: Scenario = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if let (Some(s), Some(mc)) = (seed, scenario.mc.as_mut()) {
            mc.seed = s;
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_scenario(scenario, base_dir)
    }

    pub fn from_scenario(scenario: Scenario, base_dir: PathBuf) -> Result<Self, CliError> {
        scenario.validate()?;
        let mut table_bytes = Vec::new();
        let tables = match &scenario.market {
            MarketConfig::Example { .. } => None,
            MarketConfig::Tabulated { a_tilde, f_tilde } => {
                let grid = TimeGrid::new(scenario.horizon, scenario.n_steps)?;
                let a_raw = read_table(&base_dir.join(a_tilde))?;
                let f_raw = read_table(&base_dir.join(f_tilde))?;
                let a = read_vector_csv(a_raw.as_slice())?;
                if a.len() != scenario.n_steps {
                    return Err(CliError::Validation(format!(
                        "a_tilde has {} values, n_steps is {}",
                        a.len(),
                        scenario.n_steps
                    )));
                }
                let f = Kernel::read_csv(f_raw.as_slice(), grid)?;
                table_bytes.extend_from_slice(&a_raw);
                table_bytes.extend_from_slice(&f_raw);
                Some((a, f))
            }
        };
        let mut loaded = LoadedScenario {
            scenario,
            base_dir,
            tables,
            table_bytes,
            hash: String::new(),
        };
        loaded.rehash();
        // the delay is validated against the grid up front
        loaded.delay()?;
        Ok(loaded)
    }

    fn rehash(&mut self) {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.scenario).expect("scenario serializes"));
        h.update(&self.table_bytes);
        self.hash = hex::encode(h.finalize());
    }

    /// The same scenario on a different number of steps. Tabulated markets
    /// only exist at their own resolution.
    pub fn with_steps(&self, n_steps: usize) -> Result<Self, CliError> {
        if n_steps == self.scenario.n_steps {
            return Ok(self.clone());
        }
        if self.tables.is_some() {
            return Err(CliError::Validation(format!(
                "tabulated market is fixed at n_steps = {}, cannot use {n_steps}",
                self.scenario.n_steps
            )));
        }
        let mut scenario = self.scenario.clone();
        scenario.n_steps = n_steps;
        Self::from_scenario(scenario, self.base_dir.clone())
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        Ok(TimeGrid::new(self.scenario.horizon, self.scenario.n_steps)?)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            scenario_hash: self.hash.clone(),
            horizon: self.scenario.horizon,
            n_steps: self.scenario.n_steps,
            step: self.scenario.horizon / self.scenario.n_steps as f64,
        }
    }

    pub fn delay(&self) -> Result<DelayMap, CliError> {
        Ok(DelayMap::from_spec(
            self.scenario.delay.clone(),
            self.scenario.epsilon,
            &self.grid()?,
        )?)
    }

    pub fn market_spec(&self) -> Result<MarketSpec, CliError> {
        match (&self.scenario.market, &self.tables) {
            (MarketConfig::Example { .. }, _) => Ok(self.example()?.expect("example market").market_spec(self.grid()?)?),
            (MarketConfig::Tabulated { .. }, Some((a, f))) => Ok(MarketSpec::new(a.clone(), f.clone())?),
            (MarketConfig::Tabulated { .. }, None) => unreachable!("tables are loaded with the scenario"),
        }
    }

    /// Parameters for the closed forms, when the market is the example one.
    pub fn example(&self) -> Result<Option<ExampleParams>, CliError> {
        match self.scenario.market {
            MarketConfig::Example { mu, sigma2 } => Ok(Some(ExampleParams::new(mu, sigma2, Some(self.delay()?))?)),
            MarketConfig::Tabulated { .. } => Ok(None),
        }
    }

    /// `true` for a tabulated market whose `f̃` vanishes identically.
    pub fn is_covariance_free(&self) -> bool {
        matches!(&self.tables, Some((_, f)) if f.max_abs() == 0.0)
    }

    /// `ã` when it was given as a table.
    pub fn a_tilde_table(&self) -> Option<&[f64]> {
        self.tables.as_ref().map(|(a, _)| a.as_slice())
    }

    pub fn mc(&self) -> Result<&McConfig, CliError> {
        self.scenario
            .mc
            .as_ref()
            .ok_or_else(|| CliError::Validation("scenario has no mc section".into()))
    }
}

fn read_table(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Validation(format!("cannot read table {}: {e}", path.display())))
}
