//! Experiment configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::DqnConfig;
use crate::dataset::{CleanConfig, ScaleMode, SynthProfile};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::forecaster::TftConfig;
use crate::nn::RngStream;
use crate::topology::FatTreeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceSource {
    Synthetic,
    File,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateProfile {
    #[default]
    Rate500,
    /// Doubles routed demand and burst amplitude.
    Rate1000,
}

impl RateProfile {
    pub fn multiplier(self) -> f64 {
        match self {
            RateProfile::Rate500 => 1.0,
            RateProfile::Rate1000 => 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: TraceSource,
    /// Trace CSV read when `source = "file"`.
    pub path: Option<PathBuf>,
    /// Steps per link of the synthetic forecasting trace.
    pub steps: usize,
    pub scale_mode: ScaleMode,
    pub synth: SynthProfile,
    pub clean: CleanConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: TraceSource::Synthetic,
            path: None,
            steps: 2000,
            scale_mode: ScaleMode::Minmax,
            synth: SynthProfile::default(),
            clean: CleanConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Independent traffic realizations.
    pub seeds: usize,
    /// Episodes per realization.
    pub episodes: usize,
    /// WRR weights; empty derives them from link capacities.
    pub wrr_weights: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            episodes: 10,
            wrr_weights: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub profile: RateProfile,
    pub dataset: DatasetConfig,
    pub topology: FatTreeConfig,
    pub env: EnvConfig,
    pub forecaster: TftConfig,
    pub dqn: DqnConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 42,
            profile: RateProfile::default(),
            dataset: DatasetConfig::default(),
            topology: FatTreeConfig::default(),
            env: EnvConfig::default(),
            forecaster: TftConfig::default(),
            dqn: DqnConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every field, defaults included; loading it back gives the same config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Config(format!("invalid run name `{}`", self.name)));
        }
        if self.dataset.source == TraceSource::File && self.dataset.path.is_none() {
            return Err(Error::Config("dataset.source = \"file\" needs dataset.path".into()));
        }
        if self.dataset.steps == 0 {
            return Err(Error::Config("dataset.steps must be positive".into()));
        }
        if self.eval.seeds == 0 || self.eval.episodes == 0 {
            return Err(Error::Config("eval.seeds and eval.episodes must be positive".into()));
        }
        if self.eval.wrr_weights.contains(&0) {
            return Err(Error::Config("eval.wrr_weights entries must be >= 1".into()));
        }
        self.dataset.synth.validate()?;
        self.env.validate()?;
        self.forecaster.validate()?;
        self.dqn.validate()
    }

    /// Synthetic traffic profile after applying the rate profile.
    pub fn traffic_profile(&self) -> SynthProfile {
        SynthProfile {
            burst_amp: self.dataset.synth.burst_amp * self.profile.multiplier(),
            ..self.dataset.synth.clone()
        }
    }

    /// Environment settings after applying the rate profile.
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            demand_kbps: self.env.demand_kbps * self.profile.multiplier(),
            ..self.env.clone()
        }
    }

    /// Seed for a named stage, independent of every other stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        RngStream::new(self.seed).derive(stage).next_u64()
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(&self.name)
    }
}
