//! TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ene_core::numerics::FD_STEP;
use ene_core::sim::ControllerKind;
use ene_core::systems::ScenarioSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

/// Everything a command needs. Keys missing from the file take the defaults
/// shown by `--print-config`; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub controllers: Vec<ControllerKind>,
    pub output_dir: PathBuf,
    /// Overrides `scenario.generator.seed` when set.
    pub seed: Option<u64>,
    /// File format of per-step trajectories.
    pub format: OutputFormat,
    pub preview_sweep: bool,
    /// Central-difference step used by `check`.
    pub fd_step: f64,
    pub scenario: ScenarioSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            controllers: ControllerKind::ALL.to_vec(),
            output_dir: PathBuf::from("out"),
            seed: None,
            format: OutputFormat::Csv,
            preview_sweep: false,
            fd_step: FD_STEP,
            scenario: ScenarioSpec::small(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// The scenario with the seed override applied.
    pub fn effective_scenario(&self) -> ScenarioSpec {
        match self.seed {
            Some(seed) => self.scenario.clone().with_seed(seed),
            None => self.scenario.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_scenario().validate()?;
        if !(self.fd_step.is_finite() && self.fd_step > 0.0) {
            anyhow::bail!("fd_step must be positive, got {}", self.fd_step);
        }
        if self.controllers.is_empty() {
            anyhow::bail!("at least one controller is required");
        }
        Ok(())
    }
}
