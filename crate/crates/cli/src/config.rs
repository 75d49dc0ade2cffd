//! Experiment configuration file.
//!
//! Every key is optional. Sections left out take the defaults of the selected
//! system; sections given partially are overlaid on those defaults. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::Context;
use oehnn::data::Protocol;
use oehnn::dynamics::SystemSpec;
use oehnn::eval::Reference;
use oehnn::netmodel::ModelKind;
use oehnn::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SystemName {
    Duffing,
    Coupled,
}

impl SystemName {
    pub fn spec(self) -> SystemSpec {
        match self {
            SystemName::Duffing => SystemSpec::duffing(),
            SystemName::Coupled => SystemSpec::coupled(),
        }
    }

    pub fn protocol(self) -> Protocol {
        match self {
            SystemName::Duffing => Protocol::duffing(),
            SystemName::Coupled => Protocol::coupled(),
        }
    }

    /// Full-horizon rollouts of an untrained two-mass model stall; it starts
    /// on short sub-rollouts.
    pub fn train(self) -> TrainConfig {
        match self {
            SystemName::Duffing => TrainConfig::default(),
            SystemName::Coupled => TrainConfig {
                warmup_epochs: 600,
                warmup_chunk_len: 50,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub reference: Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemName,
    /// Master seed of dataset generation.
    pub seed: u64,
    pub model: ModelKind,
    pub plant: SystemSpec,
    pub protocol: Protocol,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub paths: Paths,
}

impl ExperimentConfig {
    pub fn for_system(system: SystemName) -> Self {
        ExperimentConfig {
            system,
            seed: 0,
            model: ModelKind::OeHnn,
            plant: system.spec(),
            protocol: system.protocol(),
            train: system.train(),
            eval: EvalSection::default(),
            paths: Paths::default(),
        }
    }

    /// Parses `text`, filling absent keys from the defaults of the system it
    /// names (Duffing when it names none).
    pub fn parse(text: &str) -> Result<Self, UsageError> {
        let user: toml::Table = text.parse().map_err(|e| UsageError(format!("config: {e}")))?;
        let system = match user.get("system") {
            None => SystemName::Duffing,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| UsageError(format!("config key `system`: {e}")))?,
        };
        let defaults = toml::to_string(&ExperimentConfig::for_system(system)).expect("defaults serialize");
        let mut merged: toml::Table = defaults.parse().expect("defaults parse");
        overlay(&mut merged, user);
        let cfg: ExperimentConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| UsageError(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Ok(Self::parse(&text).map_err(|e| UsageError(format!("{}: {}", path.display(), e.0)))?)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        self.plant.validate().map_err(|e| UsageError(e.to_string()))?;
        self.protocol.validate().map_err(|e| UsageError(e.to_string()))?;
        self.train.validate().map_err(|e| UsageError(e.to_string()))?;
        self.train.loss_for(self.model).map_err(|e| UsageError(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string(self).context("serializing the effective config")
    }

    /// Writes the effective config and run provenance into `dir`.
    pub fn echo(&self, dir: &Path, command: &str) -> anyhow::Result<()> {
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        let run = format!(
            "tool = \"oehnn\"\nversion = \"{}\"\ncommand = \"{}\"\ndata_seed = {}\ntrain_seed = {}\n",
            env!("CARGO_PKG_VERSION"),
            command,
            self.seed,
            self.train.seed
        );
        let path = dir.join("run.toml");
        std::fs::write(&path, run).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Recursively replaces entries of `base` with those of `user`.
fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
