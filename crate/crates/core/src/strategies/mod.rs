//! Placement and asynchrony strategies, expressed as worker programs.
//!
//! The five rungs of the ladder are cumulative: colocated and disaggregated
//! are synchronous; train-async lets the trainer fire on the sample threshold;
//! rollout-async adds per-environment requests served by a dynamic batcher;
//! streamer splits the global batch into micro-batches with one update per
//! global batch.

mod batcher;
mod workers;

pub use batcher::{dynamic_batch_collect, replay_trace, DynamicBatcher, DynamicBatcherConfig};
pub use workers::{
    AsyncTrainer, CpuEnvWorker, Episode, GpuEnvGroup, InferenceServer, RolloutMode, StreamingTrainer,
    SyncRolloutWorker, SyncTrainer,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::BatchTarget;
use crate::sim::program::{DeviceId, Role, WorkerProgram};
use crate::workload::{EnvModel, WorkloadPreset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error("invalid strategy: {0}")]
    Invalid(String),
    #[error("micro-batch of {micro} samples exceeds the global batch of {global}")]
    MicroBatchTooLarge { micro: u64, global: u64 },
    #[error("disaggregated placement needs at least 2 devices, got {0}")]
    TooFewDevices(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    Colocated,
    Disaggregated {
        /// Fraction of devices running rollout; the rest train.
        #[serde(default = "half")]
        rollout_fraction: f64,
    },
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutAsyncConfig {
    pub batcher: DynamicBatcherConfig,
    /// Envs per env-side mini-batch; `None` means all envs of a rollout device.
    #[serde(default)]
    pub env_minibatch_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamerConfig {
    /// Split the global batch into this many micro-batches.
    MicroBatches(u32),
    MicroBatchSamples(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub placement: Placement,
    #[serde(default)]
    pub train_async: bool,
    #[serde(default)]
    pub rollout_async: Option<RolloutAsyncConfig>,
    #[serde(default)]
    pub streamer: Option<StreamerConfig>,
}

/// Rows of the strategy ladder, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ladder {
    Colocated,
    Disaggregated,
    TrainAsync,
    RolloutAsync,
    Streamer,
}

impl Ladder {
    pub const ALL: [Ladder; 5] = [
        Ladder::Colocated,
        Ladder::Disaggregated,
        Ladder::TrainAsync,
        Ladder::RolloutAsync,
        Ladder::Streamer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Ladder::Colocated => "colocated",
            Ladder::Disaggregated => "disaggregated",
            Ladder::TrainAsync => "train_async",
            Ladder::RolloutAsync => "rollout_async",
            Ladder::Streamer => "streamer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == s)
    }
}

impl StrategyConfig {
    /// The ladder rung with defaults taken from the preset.
    pub fn ladder(step: Ladder, preset: &WorkloadPreset) -> Self {
        let rollout_async = RolloutAsyncConfig {
            batcher: DynamicBatcherConfig {
                b_max: preset.rollout_async.b_max,
                t_max: preset.rollout_async.t_max,
            },
            env_minibatch_size: preset.rollout_async.env_minibatch_size,
        };
        let disagg = Placement::Disaggregated { rollout_fraction: 0.5 };
        match step {
            Ladder::Colocated => Self {
                placement: Placement::Colocated,
                train_async: false,
                rollout_async: None,
                streamer: None,
            },
            Ladder::Disaggregated => Self {
                placement: disagg,
                train_async: false,
                rollout_async: None,
                streamer: None,
            },
            Ladder::TrainAsync => Self {
                placement: disagg,
                train_async: true,
                rollout_async: None,
                streamer: None,
            },
            Ladder::RolloutAsync => Self {
                placement: disagg,
                train_async: true,
                rollout_async: Some(rollout_async),
                streamer: None,
            },
            Ladder::Streamer => Self {
                placement: disagg,
                train_async: true,
                rollout_async: Some(rollout_async),
                streamer: Some(StreamerConfig::MicroBatches(preset.streamer.micro_batches)),
            },
        }
    }

    pub fn rung(&self) -> Ladder {
        match (self.placement, self.train_async, self.rollout_async, self.streamer) {
            (Placement::Colocated, ..) => Ladder::Colocated,
            (_, false, ..) => Ladder::Disaggregated,
            (_, true, None, _) => Ladder::TrainAsync,
            (_, true, Some(_), None) => Ladder::RolloutAsync,
            (_, true, Some(_), Some(_)) => Ladder::Streamer,
        }
    }

    pub fn label(&self) -> &'static str {
        self.rung().name()
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        let bad = |m: &str| Err(StrategyError::Invalid(m.to_string()));
        if let Placement::Disaggregated { rollout_fraction } = self.placement {
            if !(rollout_fraction > 0.0 && rollout_fraction < 1.0) {
                return bad("rollout_fraction must be in (0, 1)");
            }
        }
        if self.train_async && self.placement == Placement::Colocated {
            return bad("train_async requires disaggregated placement");
        }
        if self.rollout_async.is_some() && !self.train_async {
            return bad("rollout_async requires train_async");
        }
        if self.streamer.is_some() && self.rollout_async.is_none() {
            return bad("streamer requires rollout_async");
        }
        if let Some(ra) = &self.rollout_async {
            ra.batcher.validate().map_err(StrategyError::Invalid)?;
            if ra.env_minibatch_size == Some(0) {
                return bad("env_minibatch_size must be >= 1");
            }
        }
        match self.streamer {
            Some(StreamerConfig::MicroBatches(0)) | Some(StreamerConfig::MicroBatchSamples(0)) => {
                bad("micro-batch size must be >= 1")
            }
            _ => Ok(()),
        }
    }
}

/// A strategy resolved against a device count and workload.
#[derive(Debug, Clone)]
pub struct Plan {
    pub strategy: StrategyConfig,
    pub preset: WorkloadPreset,
    pub device_count: usize,
    pub rollout_devices: Vec<DeviceId>,
    pub train_devices: Vec<DeviceId>,
    /// Env ids hosted by each rollout device, parallel to `rollout_devices`.
    pub envs_by_device: Vec<Vec<usize>>,
    pub total_envs: usize,
    pub global_batch_samples: u64,
    pub micro_batch_samples: Option<u64>,
    pub pipe_capacity: usize,
}

impl Plan {
    pub fn new(
        strategy: StrategyConfig,
        preset: WorkloadPreset,
        device_count: usize,
        total_envs: Option<usize>,
        global_batch_samples: Option<u64>,
        pipe_capacity: Option<usize>,
    ) -> Result<Self, StrategyError> {
        strategy.validate()?;
        if device_count == 0 {
            return Err(StrategyError::Invalid("device_count must be >= 1".into()));
        }
        let all: Vec<DeviceId> = (0..device_count).collect();
        let (rollout_devices, train_devices) = match strategy.placement {
            Placement::Colocated => (all.clone(), all),
            Placement::Disaggregated { rollout_fraction } => {
                if device_count < 2 {
                    return Err(StrategyError::TooFewDevices(device_count));
                }
                // odd counts round the rollout side up
                let r = ((device_count as f64 * rollout_fraction).ceil() as usize).clamp(1, device_count - 1);
                (all[..r].to_vec(), all[r..].to_vec())
            }
        };
        let total_envs = total_envs.unwrap_or_else(|| preset.total_envs(device_count));
        if total_envs < rollout_devices.len() {
            return Err(StrategyError::Invalid(format!(
                "{total_envs} envs cannot cover {} rollout devices",
                rollout_devices.len()
            )));
        }
        let per = total_envs / rollout_devices.len();
        let extra = total_envs % rollout_devices.len();
        let mut next = 0;
        let envs_by_device = (0..rollout_devices.len())
            .map(|i| {
                let n = per + usize::from(i < extra);
                let ids = (next..next + n).collect();
                next += n;
                ids
            })
            .collect();
        let global_batch_samples = global_batch_samples.unwrap_or_else(|| {
            ((total_envs as f64 * preset.episode.mean_samples()).round() as u64).max(1)
        });
        let micro_batch_samples = match strategy.streamer {
            None => None,
            Some(StreamerConfig::MicroBatches(k)) => Some(global_batch_samples.div_ceil(k as u64)),
            Some(StreamerConfig::MicroBatchSamples(m)) => {
                if m > global_batch_samples {
                    return Err(StrategyError::MicroBatchTooLarge {
                        micro: m,
                        global: global_batch_samples,
                    });
                }
                Some(m)
            }
        };
        let pipe_capacity = pipe_capacity.unwrap_or(4 * total_envs).max(1);
        Ok(Self {
            strategy,
            preset,
            device_count,
            rollout_devices,
            train_devices,
            envs_by_device,
            total_envs,
            global_batch_samples,
            micro_batch_samples,
            pipe_capacity,
        })
    }

    pub fn is_synchronous(&self) -> bool {
        !self.strategy.train_async
    }

    /// What each device does, for reporting.
    pub fn device_roles(&self) -> Vec<&'static str> {
        (0..self.device_count)
            .map(|d| {
                let r = self.rollout_devices.contains(&d);
                let t = self.train_devices.contains(&d);
                match (r, t) {
                    (true, true) => "rollout+train",
                    (true, false) => "rollout",
                    (false, true) => "train",
                    (false, false) => "idle",
                }
            })
            .collect()
    }
}

/// Worker programs plus the batchers they share.
pub struct Schedule {
    pub workers: Vec<Box<dyn WorkerProgram>>,
    pub batchers: Vec<DynamicBatcherConfig>,
}

impl Schedule {
    pub fn roles(&self) -> Vec<Role> {
        self.workers.iter().map(|w| w.role()).collect()
    }
}

fn sync_rollout(plan: &Plan, seed: u64, mode: RolloutMode, load_weights: bool) -> Vec<Box<dyn WorkerProgram>> {
    plan.rollout_devices
        .iter()
        .zip(&plan.envs_by_device)
        .map(|(&device, envs)| {
            Box::new(SyncRolloutWorker::new(
                device,
                envs,
                &plan.preset,
                seed,
                mode,
                load_weights,
                plan.rollout_devices.len(),
            )) as Box<dyn WorkerProgram>
        })
        .collect()
}

/// All devices alternate between a rollout phase and a training phase.
pub fn schedule_colocated(plan: &Plan, seed: u64) -> Schedule {
    let mut workers = sync_rollout(plan, seed, RolloutMode::Round, false);
    workers.push(Box::new(SyncTrainer::new(
        plan.train_devices.clone(),
        BatchTarget::Trajectories(plan.total_envs),
        &plan.preset,
    )));
    Schedule { workers, batchers: Vec::new() }
}

/// Disjoint rollout and training devices with a synchronous handoff.
pub fn schedule_disaggregated(plan: &Plan, seed: u64) -> Schedule {
    let mut workers = sync_rollout(plan, seed, RolloutMode::Round, true);
    workers.push(Box::new(SyncTrainer::new(
        plan.train_devices.clone(),
        BatchTarget::Trajectories(plan.total_envs),
        &plan.preset,
    )));
    Schedule { workers, batchers: Vec::new() }
}

/// Rollout devices produce continuously; the trainer fires on the sample threshold.
pub fn schedule_train_async(plan: &Plan, seed: u64) -> Schedule {
    let mut workers = sync_rollout(plan, seed, RolloutMode::Continuous, true);
    workers.push(Box::new(AsyncTrainer::new(
        plan.train_devices.clone(),
        plan.global_batch_samples,
        &plan.preset,
    )));
    Schedule { workers, batchers: Vec::new() }
}

fn async_rollout(plan: &Plan, seed: u64, cfg: &RolloutAsyncConfig) -> Schedule {
    let mut workers: Vec<Box<dyn WorkerProgram>> = Vec::new();
    let mut batchers = Vec::new();
    let n_rollout = plan.rollout_devices.len();
    for (batcher, (&device, envs)) in plan.rollout_devices.iter().zip(&plan.envs_by_device).enumerate() {
        batchers.push(cfg.batcher);
        workers.push(Box::new(InferenceServer::new(device, batcher, &plan.preset, n_rollout)));
        match plan.preset.cost.env {
            EnvModel::CpuPerEnv { .. } => {
                for &env in envs {
                    workers.push(Box::new(CpuEnvWorker::new(env, device, batcher, &plan.preset, seed)));
                }
            }
            EnvModel::GpuBatched { .. } => {
                let size = cfg.env_minibatch_size.unwrap_or(envs.len()).max(1);
                for group in envs.chunks(size) {
                    workers.push(Box::new(GpuEnvGroup::new(group, device, batcher, &plan.preset, seed)));
                }
            }
        }
    }
    Schedule { workers, batchers }
}

/// Per-environment requests through a dynamic batcher on each rollout device.
pub fn schedule_rollout_async(plan: &Plan, seed: u64) -> Schedule {
    let cfg = plan.strategy.rollout_async.expect("validated rollout_async config");
    let mut s = async_rollout(plan, seed, &cfg);
    s.workers.push(Box::new(AsyncTrainer::new(
        plan.train_devices.clone(),
        plan.global_batch_samples,
        &plan.preset,
    )));
    s
}

/// Rollout-async with micro-batched training and one update per global batch.
pub fn schedule_streamer(plan: &Plan, seed: u64) -> Schedule {
    let cfg = plan.strategy.rollout_async.expect("validated rollout_async config");
    let mut s = async_rollout(plan, seed, &cfg);
    let micro = plan.micro_batch_samples.unwrap_or(plan.global_batch_samples);
    s.workers.push(Box::new(StreamingTrainer::new(
        plan.train_devices.clone(),
        plan.global_batch_samples,
        micro,
        &plan.preset,
    )));
    s
}

pub fn schedule(plan: &Plan, seed: u64) -> Schedule {
    match plan.strategy.rung() {
        Ladder::Colocated => schedule_colocated(plan, seed),
        Ladder::Disaggregated => schedule_disaggregated(plan, seed),
        Ladder::TrainAsync => schedule_train_async(plan, seed),
        Ladder::RolloutAsync => schedule_rollout_async(plan, seed),
        Ladder::Streamer => schedule_streamer(plan, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset() -> WorkloadPreset {
        WorkloadPreset::builtin("libero_pi05").unwrap()
    }

    #[test]
    fn ladder_is_cumulative_and_valid() {
        let p = preset();
        for step in Ladder::ALL {
            let s = StrategyConfig::ladder(step, &p);
            s.validate().unwrap();
            assert_eq!(s.rung(), step);
            assert_eq!(Ladder::parse(step.name()), Some(step));
        }
    }

    #[test]
    fn invalid_combinations_rejected() {
        let p = preset();
        let mut s = StrategyConfig::ladder(Ladder::RolloutAsync, &p);
        s.train_async = false;
        assert!(s.validate().is_err());
        let mut s = StrategyConfig::ladder(Ladder::Streamer, &p);
        s.rollout_async = None;
        assert!(s.validate().is_err());
        let mut s = StrategyConfig::ladder(Ladder::TrainAsync, &p);
        s.placement = Placement::Colocated;
        assert!(s.validate().is_err());
    }

    #[test]
    fn disaggregated_split_rounds_rollout_up() {
        let p = preset();
        let s = StrategyConfig::ladder(Ladder::Disaggregated, &p);
        let plan = Plan::new(s, p.clone(), 7, None, None, None).unwrap();
        assert_eq!(plan.rollout_devices, vec![0, 1, 2, 3]);
        assert_eq!(plan.train_devices, vec![4, 5, 6]);
        assert_eq!(plan.envs_by_device.iter().map(Vec::len).sum::<usize>(), plan.total_envs);
        assert!(matches!(
            Plan::new(s, p, 1, None, None, None),
            Err(StrategyError::TooFewDevices(1))
        ));
    }

    #[test]
    fn colocated_uses_every_device_for_both_roles() {
        let p = preset();
        let plan = Plan::new(StrategyConfig::ladder(Ladder::Colocated, &p), p, 4, None, None, None).unwrap();
        assert_eq!(plan.device_roles(), vec!["rollout+train"; 4]);
    }

    #[test]
    fn oversized_micro_batch_is_a_config_error() {
        let p = preset();
        let mut s = StrategyConfig::ladder(Ladder::Streamer, &p);
        s.streamer = Some(StreamerConfig::MicroBatchSamples(1_000_000));
        assert!(matches!(
            Plan::new(s, p, 8, None, None, None),
            Err(StrategyError::MicroBatchTooLarge { .. })
        ));
    }
}
