//! Named workload configurations shipped as TOML files under `presets/`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ddp_epoch_time, CostModel, DdpCostModel, EpisodeModel, ModelError, NetworkModel, ScalingConfig};

pub const BUILTIN_WORKLOADS: &[(&str, &str)] = &[
    ("libero_pi05", include_str!("../../presets/libero_pi05.toml")),
    ("libero_gr00t", include_str!("../../presets/libero_gr00t.toml")),
    ("maniskill_pi0", include_str!("../../presets/maniskill_pi0.toml")),
];

pub const BUILTIN_DDP: &[(&str, &str)] = &[
    ("ddp_gr00t", include_str!("../../presets/ddp_gr00t.toml")),
    ("ddp_gr00t_storage", include_str!("../../presets/ddp_gr00t_storage.toml")),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PresetError {
    #[error("unknown preset `{0}`")]
    Unknown(String),
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("preset `{name}`: {source}")]
    Invalid { name: String, source: ModelError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    /// Environments per device under colocated placement; the total env count
    /// is `envs_per_device * device_count` whatever the placement.
    pub envs_per_device: usize,
}

/// Defaults used when a strategy enables rollout asynchrony.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutAsyncDefaults {
    pub b_max: usize,
    pub t_max: f64,
    /// Envs per env-side mini-batch; `None` means one mini-batch per rollout device.
    #[serde(default)]
    pub env_minibatch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamerDefaults {
    /// Micro-batches per global batch.
    pub micro_batches: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadPreset {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub episode: EpisodeModel,
    pub cost: CostModel,
    pub network: NetworkModel,
    pub layout: Layout,
    pub rollout_async: RolloutAsyncDefaults,
    pub streamer: StreamerDefaults,
}

impl WorkloadPreset {
    pub fn builtin(name: &str) -> Result<Self, PresetError> {
        let (_, text) = BUILTIN_WORKLOADS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| PresetError::Unknown(name.to_string()))?;
        Self::parse(text, &format!("<builtin {name}>"))
    }

    pub fn load(path: &Path) -> Result<Self, PresetError> {
        let text = std::fs::read_to_string(path).map_err(|e| PresetError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// A builtin name or a path to a preset file.
    pub fn resolve(name_or_path: &str) -> Result<Self, PresetError> {
        match Self::builtin(name_or_path) {
            Ok(p) => Ok(p),
            Err(PresetError::Unknown(_)) if Path::new(name_or_path).exists() => {
                Self::load(Path::new(name_or_path))
            }
            Err(e) => Err(e),
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, PresetError> {
        let preset: Self = toml::from_str(text).map_err(|e| PresetError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        preset.validate()?;
        Ok(preset)
    }

    pub fn validate(&self) -> Result<(), PresetError> {
        let wrap = |source| PresetError::Invalid {
            name: self.name.clone(),
            source,
        };
        self.episode.validate().map_err(wrap)?;
        self.cost.validate().map_err(wrap)?;
        self.network.validate().map_err(wrap)?;
        if self.layout.envs_per_device == 0 {
            return Err(wrap(ModelError::Invalid {
                field: "layout.envs_per_device".into(),
                reason: "must be >= 1".into(),
            }));
        }
        Ok(())
    }

    pub fn total_envs(&self, device_count: usize) -> usize {
        self.layout.envs_per_device * device_count
    }

    /// Global training batch in samples: one expected episode per environment.
    pub fn global_batch_samples(&self, device_count: usize) -> u64 {
        let per_env = self.episode.mean_samples();
        ((self.total_envs(device_count) as f64 * per_env).round() as u64).max(1)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}

/// Data-parallel supervised training preset (epoch-time model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpPreset {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Assumed samples per epoch; absolute times scale with it.
    pub dataset_size: u64,
    pub cost: DdpCostModel,
}

impl DdpPreset {
    pub fn builtin(name: &str) -> Result<Self, PresetError> {
        let (_, text) = BUILTIN_DDP
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| PresetError::Unknown(name.to_string()))?;
        Self::parse(text, &format!("<builtin {name}>"))
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, PresetError> {
        let preset: Self = toml::from_str(text).map_err(|e| PresetError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        preset.cost.network.validate().map_err(|source| PresetError::Invalid {
            name: preset.name.clone(),
            source,
        })?;
        Ok(preset)
    }

    pub fn scaling(&self, dp: usize, mbs: u64) -> ScalingConfig {
        ScalingConfig {
            mbs,
            dp,
            dataset_size: self.dataset_size,
        }
    }

    /// Seconds per epoch.
    pub fn epoch_time(&self, dp: usize, mbs: u64) -> f64 {
        ddp_epoch_time(&self.scaling(dp, mbs), &self.cost)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}
