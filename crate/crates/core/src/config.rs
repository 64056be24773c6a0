//! The single JSON run configuration shared by every entry point.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::Hyperparams;
use crate::dual_loop::{ActionRule, PenaltyConfig};
use crate::env::GridConfig;
use crate::error::{Error, Result};
use crate::experiment::{ArmSpec, ExperimentConfig};
use crate::ghost::LayerConfig;
use crate::sim::{AutoLabel, SimSettings};
use crate::taxonomy::Thresholds;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default = "default_snapshot_interval")]
    pub snapshot_interval: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_snapshot_interval() -> u64 {
    10
}

impl Default for AgentSection {
    fn default() -> Self {
        AgentSection {
            hyperparams: Hyperparams::default(),
            snapshot_interval: default_snapshot_interval(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default = "default_tick_rate")]
    pub tick_rate_hz: u32,
}

fn default_port() -> u16 {
    7878
}
fn default_tick_rate() -> u32 {
    10
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            port: default_port(),
            tick_rate_hz: default_tick_rate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data_dir: default_data_dir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub environment: GridConfig,
    #[serde(default)]
    pub agent: AgentSection,
    #[serde(default)]
    pub layers: LayerConfig,
    #[serde(default)]
    pub taxonomy: Thresholds,
    #[serde(default)]
    pub dual_loop: PenaltyConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            environment: GridConfig::default(),
            agent: AgentSection::default(),
            layers: LayerConfig::default(),
            taxonomy: Thresholds::default(),
            dual_loop: PenaltyConfig::default(),
            experiment: ExperimentConfig::default(),
            server: ServerSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates everything except the experiment section, which
    /// only `evaluate` needs (see [`RunConfig::validate_experiment`]).
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version must be {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        self.sim_settings().validate()?;
        self.dual_loop.validate()?;
        if !(1..=120).contains(&self.server.tick_rate_hz) {
            return Err(Error::Config(format!(
                "server.tick_rate_hz must lie in [1, 120], got {}",
                self.server.tick_rate_hz
            )));
        }
        Ok(())
    }

    pub fn validate_experiment(&self) -> Result<()> {
        self.experiment.validate(&self.environment)
    }

    /// Settings for a live or `train` run, using the conditioned action rule.
    pub fn sim_settings(&self) -> SimSettings {
        SimSettings {
            environment: self.environment.clone(),
            hyperparams: self.agent.hyperparams.clone(),
            snapshot_interval: self.agent.snapshot_interval,
            seed: self.agent.seed,
            layers: self.layers.clone(),
            thresholds: self.taxonomy.clone(),
            rule: ActionRule::Conditioned(self.dual_loop.clone()),
            auto_label: AutoLabel::Every,
            spawn_ghosts: true,
        }
    }

    /// The shared part of both experiment arms; `rule` is replaced per arm.
    pub fn arm_spec(&self) -> ArmSpec {
        ArmSpec {
            environment: self.environment.clone(),
            hyperparams: self.agent.hyperparams.clone(),
            snapshot_interval: self.agent.snapshot_interval,
            layers: self.layers.clone(),
            thresholds: self.taxonomy.clone(),
            rule: ActionRule::Plain,
            experiment: self.experiment.clone(),
        }
    }
}
