//! Experiment configuration files.
//!
//! TOML with a strict schema: every table rejects keys it does not know, so a
//! typo such as `b_maxx` fails loudly instead of silently keeping a default.
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use rlvla_core::packing::PackAlgorithm;
use rlvla_core::sim::Termination;
use rlvla_core::workload::Observation;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Executor {
    Virtual,
    Live,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub executor: Option<Executor>,
    pub run: Option<RunSection>,
    pub sweep: Option<RunSection>,
    pub live: Option<LiveSection>,
    pub packing: Option<PackingSection>,
    pub quantization: Option<QuantSection>,
    pub calibration: Option<CalibrationSection>,
    pub report: Option<ReportSection>,
}

/// One preset, a set of strategies and a set of device counts.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Builtin preset name or path to a preset file.
    pub preset: String,
    pub devices: Vec<usize>,
    /// Ladder rungs; all five when omitted.
    #[serde(default)]
    pub strategies: Vec<String>,
    pub updates: Option<u64>,
    pub samples: Option<u64>,
    /// Simulated seconds.
    pub duration: Option<f64>,
    pub warmup_updates: Option<u64>,
    pub pipe_capacity: Option<usize>,
    pub total_envs: Option<usize>,
    pub global_batch_samples: Option<u64>,
    pub metrics_resolution: Option<f64>,
    pub rollout_fraction: Option<f64>,
    pub micro_batches: Option<u32>,
    pub per_worker_comm: Option<f64>,
    pub batcher: Option<BatcherSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatcherSection {
    pub b_max: Option<usize>,
    pub t_max: Option<f64>,
    pub env_minibatch_size: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveSection {
    /// Real seconds per simulated second.
    #[serde(default = "default_time_scale")]
    pub time_scale: f64,
    #[serde(default = "default_watchdog")]
    pub watchdog_seconds: f64,
}

fn default_time_scale() -> f64 {
    0.1
}

fn default_watchdog() -> f64 {
    10.0
}

impl Default for LiveSection {
    fn default() -> Self {
        Self { time_scale: default_time_scale(), watchdog_seconds: default_watchdog() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackingSection {
    /// CSV corpus `id,text,<view>...`; exclusive with `preset`.
    pub corpus: Option<PathBuf>,
    /// Builtin synthetic corpus.
    pub preset: Option<String>,
    pub capacity: Option<u64>,
    /// Fixed length every sample is padded to without packing; defaults to capacity.
    pub pad_to: Option<u64>,
    /// Hidden size for the FLOP estimates.
    pub dim: Option<u64>,
    #[serde(default = "default_algorithm")]
    pub algorithm: PackAlgorithm,
    /// Drop this view's tokens before packing.
    pub prune_view: Option<String>,
}

fn default_algorithm() -> PackAlgorithm {
    PackAlgorithm::Ffd
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSection {
    /// Tensor files: `.txt` text, anything else the binary tensor format.
    #[serde(default)]
    pub fixtures: Vec<PathBuf>,
    #[serde(default)]
    pub synthetic: Vec<SyntheticFixture>,
    /// `per_tensor`, `per_channel[:axis]`, `per_block[:RxC]`.
    #[serde(default = "default_granularities")]
    pub granularities: Vec<String>,
    /// Builtin model name or path for the compression table.
    pub model: Option<String>,
    /// Also write each quantized tensor next to the tables.
    #[serde(default)]
    pub write_quantized: bool,
}

fn default_granularities() -> Vec<String> {
    vec!["per_tensor".into(), "per_channel:0".into(), "per_block:128x128".into()]
}

/// Gaussian tensor whose rows have standard deviations spread
/// geometrically from `sd` to `sd * row_spread`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFixture {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default = "one")]
    pub sd: f64,
    #[serde(default = "one")]
    pub row_spread: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    /// Builtin workload or data-parallel preset.
    pub preset: String,
    /// Coefficients to fit; every coefficient of the observed families when omitted.
    pub free: Option<Vec<String>>,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Metrics reports written by `simulate` (single report or array).
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    #[serde(default = "default_baseline")]
    pub baseline: String,
}

fn default_baseline() -> String {
    "colocated".into()
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.out.iter_mut().for_each(fix);
        if let Some(p) = &mut self.packing {
            p.corpus.iter_mut().for_each(fix);
        }
        if let Some(q) = &mut self.quantization {
            q.fixtures.iter_mut().for_each(fix);
            if let Some(m) = &mut q.model {
                if m.ends_with(".toml") && Path::new(m).is_relative() {
                    *m = base.join(&*m).display().to_string();
                }
            }
        }
        if let Some(r) = &mut self.report {
            r.inputs.iter_mut().for_each(fix);
        }
        for s in [&mut self.run, &mut self.sweep].into_iter().flatten() {
            if s.preset.ends_with(".toml") && Path::new(&s.preset).is_relative() {
                s.preset = base.join(&s.preset).display().to_string();
            }
        }
    }

    pub fn section<'a, T>(value: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        value.as_ref().ok_or_else(|| CliError::Config(format!("config has no [{name}] section")))
    }
}

impl RunSection {
    pub fn termination(&self) -> Result<Option<Termination>, CliError> {
        let set = [self.updates.is_some(), self.samples.is_some(), self.duration.is_some()];
        if set.iter().filter(|b| **b).count() > 1 {
            return Err(CliError::Config("set at most one of updates, samples, duration".into()));
        }
        Ok(self
            .updates
            .map(Termination::Updates)
            .or(self.samples.map(Termination::Samples))
            .or(self.duration.map(Termination::Duration)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "cfg") {
                ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                n += 1;
            }
        }
        assert!(n >= 6);
    }

    #[test]
    fn termination_is_exclusive() {
        let cfg = ExperimentConfig::parse("[run]\npreset = \"x\"\ndevices = [8]\nupdates = 3\nsamples = 9\n", "t").unwrap();
        assert!(cfg.run.unwrap().termination().is_err());
    }
}
