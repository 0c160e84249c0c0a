//! Run configuration read from JSON. Every section is optional and falls back
//! to its defaults; unknown keys are rejected with their path.

use std::fs;
use std::path::{Path, PathBuf};

use diffcd::cdnet::CdHeadConfig;
use diffcd::denoiser::UNetConfig;
use diffcd::diffusion::{NoiseSchedule, ScheduleConfig, TimestepIndex};
use diffcd::fdaf::FdafConfig;
use diffcd::synthdata::SceneConfig;
use diffcd::training::{CdTrainConfig, DiffusionTrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Noise levels at which the denoiser is probed.
    pub timesteps: Vec<usize>,
    /// Seed of the fixed probe noise shared by all images.
    pub probe_seed: u64,
    /// Images per feature-extraction batch.
    pub chunk: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![5, 50],
            probe_seed: 7,
            chunk: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub diffusion: DiffusionTrainConfig,
    pub cd: CdTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub scene: SceneConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub unet: UNetConfig,
    pub features: FeatureConfig,
    pub fdaf: FdafConfig,
    pub cd: CdHeadConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Usage(format!("config key `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                Self::from_json(&text).map_err(|e| match e {
                    CliError::Usage(m) => CliError::Usage(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let schedule = self.schedule.build()?;
        self.unet.validate()?;
        self.fdaf.validate()?;
        self.cd.validate()?;
        self.data.scene.validate()?;
        self.data.scene.check_depth(self.unet.depth)?;
        if self.data.scene.channels != self.unet.in_channels {
            return Err(CliError::Usage(format!(
                "scene has {} channels but the denoiser expects {}",
                self.data.scene.channels, self.unet.in_channels
            )));
        }
        self.timesteps(&schedule)?;
        if self.features.chunk == 0 {
            return Err(CliError::Usage("features.chunk must be positive".into()));
        }
        for (name, batch, lr) in [
            ("train.diffusion", self.train.diffusion.batch, self.train.diffusion.lr),
            ("train.cd", self.train.cd.batch, self.train.cd.lr),
        ] {
            if batch == 0 || !(lr > 0.0 && lr.is_finite()) {
                return Err(CliError::Usage(format!("{name}: batch and lr must be positive")));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        Ok(self.schedule.build()?)
    }

    pub fn timesteps(&self, s: &NoiseSchedule) -> Result<Vec<TimestepIndex>, CliError> {
        if self.features.timesteps.is_empty() {
            return Err(CliError::Usage("features.timesteps must not be empty".into()));
        }
        self.features
            .timesteps
            .iter()
            .map(|&k| s.timestep(k).map_err(|e| CliError::Usage(format!("features.timesteps: {e}"))))
            .collect()
    }

    /// Applies a `--seed` override to every seeded stage.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.diffusion.seed = s;
            self.train.cd.seed = s;
            self.data.scene.seed = s;
        }
        self
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
