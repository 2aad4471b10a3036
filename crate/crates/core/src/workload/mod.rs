//! Parametric stand-ins for GPUs, environments and the network.
//!
//! Latencies are affine in their load argument. Environments are either
//! CPU-parallel (each env steps independently at a constant cost) or
//! GPU-batched (one batched call whose cost is affine in the batch size).
//! Times are in simulated seconds throughout.

mod calibrate;
mod presets;

pub use calibrate::{calibrate, CalibratedModel, Calibration, CalibrationError, Coefficient, Observation, Residual};
pub use presets::{DdpPreset, Layout, PresetError, WorkloadPreset, BUILTIN_DDP, BUILTIN_WORKLOADS};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("device count must be >= 1")]
    ZeroDevices,
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ModelError {
    ModelError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// `alpha + beta * x`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Affine {
    pub alpha: f64,
    pub beta: f64,
}

impl Affine {
    pub const ZERO: Affine = Affine { alpha: 0.0, beta: 0.0 };

    pub fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.alpha + self.beta * x
    }

    fn check(&self, field: &str, strictly_positive: bool) -> Result<(), ModelError> {
        if !(self.alpha.is_finite() && self.beta.is_finite()) || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(invalid(field, "coefficients must be finite and >= 0"));
        }
        if strictly_positive && self.eval(1.0) <= 0.0 {
            return Err(invalid(field, "latency must be > 0 for load >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvModel {
    /// Each environment steps on its own CPU core; `jitter` stretches a step by
    /// a uniform factor in `[1, 1 + jitter]`.
    CpuPerEnv {
        step_cost: f64,
        #[serde(default)]
        jitter: f64,
    },
    /// Environments of one batch step together on the device GPU.
    GpuBatched { alpha: f64, beta: f64 },
}

impl EnvModel {
    /// Wall time for one env executing `steps` steps on its own core.
    pub fn cpu_step_time<R: Rng + ?Sized>(step_cost: f64, jitter: f64, steps: u32, rng: &mut R) -> f64 {
        let stretch = if jitter > 0.0 {
            1.0 + jitter * rng.random::<f64>()
        } else {
            1.0
        };
        steps as f64 * step_cost * stretch
    }

    /// GPU time for a batch of `batch` envs advancing `steps` steps together.
    pub fn gpu_batch_time(alpha: f64, beta: f64, batch: usize, steps: u32) -> f64 {
        steps as f64 * (alpha + beta * batch as f64)
    }

    /// Total env compute for `n` envs split into `k` equal mini-batches.
    /// For CPU envs this is per-env work and independent of the split.
    pub fn split_compute(&self, n: usize, k: usize, steps: u32) -> f64 {
        match *self {
            EnvModel::CpuPerEnv { step_cost, .. } => n as f64 * steps as f64 * step_cost,
            EnvModel::GpuBatched { alpha, beta } => {
                let k = k.max(1);
                (0..k)
                    .map(|i| {
                        let size = n / k + usize::from(i < n % k);
                        Self::gpu_batch_time(alpha, beta, size, steps)
                    })
                    .sum()
            }
        }
    }

    fn check(&self) -> Result<(), ModelError> {
        match *self {
            EnvModel::CpuPerEnv { step_cost, jitter } => {
                if !(step_cost > 0.0 && step_cost.is_finite()) {
                    return Err(invalid("cost.env.step_cost", "must be > 0"));
                }
                if !(jitter >= 0.0 && jitter.is_finite()) {
                    return Err(invalid("cost.env.jitter", "must be >= 0"));
                }
            }
            EnvModel::GpuBatched { alpha, beta } => {
                Affine { alpha, beta }.check("cost.env", true)?;
            }
        }
        Ok(())
    }
}

/// Device-level latency model for one workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    /// One inference call for a batch of `b` requests.
    pub inference: Affine,
    /// Forward/backward on one device for `s` samples.
    pub train: Affine,
    pub env: EnvModel,
    /// Fixed cost paid once per synchronous round (engine switch, barrier).
    #[serde(default)]
    pub sync_overhead: f64,
    /// Time for a rollout device to load a newly published policy.
    #[serde(default)]
    pub weight_load: f64,
    /// Extra weight-distribution cost per rollout worker, paid on each load.
    #[serde(default)]
    pub per_worker_comm: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.inference.check("cost.inference", true)?;
        // zero-cost training is allowed so degenerate schedules can be analysed
        self.train.check("cost.train", false)?;
        self.env.check()?;
        for (field, v) in [
            ("cost.sync_overhead", self.sync_overhead),
            ("cost.weight_load", self.weight_load),
            ("cost.per_worker_comm", self.per_worker_comm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn inference_latency(&self, batch: usize) -> f64 {
        self.inference.eval(batch as f64)
    }

    /// Data-parallel forward/backward of `samples` spread over `devices`.
    pub fn train_compute(&self, samples: u64, devices: usize) -> f64 {
        if self.train == Affine::ZERO {
            return 0.0;
        }
        self.train.eval(samples as f64 / devices.max(1) as f64)
    }

    /// Cost for a rollout device to adopt a new policy when `rollout_workers` share the broadcast.
    pub fn policy_load(&self, rollout_workers: usize) -> f64 {
        self.weight_load + self.per_worker_comm * rollout_workers as f64
    }
}

/// Network parameters for gradient allreduce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkModel {
    pub param_bytes: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds per ring hop.
    pub link_latency: f64,
    /// Congestion coefficient multiplying `(n - 1)^2`; zero gives the plain ring.
    #[serde(default)]
    pub contention: f64,
}

impl NetworkModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.bandwidth > 0.0) {
            return Err(ModelError::NonPositiveBandwidth(self.bandwidth));
        }
        for (field, v) in [
            ("network.param_bytes", self.param_bytes),
            ("network.link_latency", self.link_latency),
            ("network.contention", self.contention),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Ring allreduce plus the congestion term.
    pub fn allreduce(&self, n: usize) -> f64 {
        let ring = allreduce_time(self.param_bytes, n, self.bandwidth, self.link_latency)
            .unwrap_or(f64::INFINITY);
        if n <= 1 {
            return ring;
        }
        let hops = (n - 1) as f64;
        ring + self.contention * hops * hops
    }
}

/// Ring allreduce: `2(n-1)/n * bytes/bandwidth + 2(n-1) * latency`, zero for one worker.
pub fn allreduce_time(
    param_bytes: f64,
    n: usize,
    bandwidth: f64,
    link_latency: f64,
) -> Result<f64, ModelError> {
    if !(bandwidth > 0.0) {
        return Err(ModelError::NonPositiveBandwidth(bandwidth));
    }
    if n == 0 {
        return Err(ModelError::ZeroDevices);
    }
    if n == 1 {
        return Ok(0.0);
    }
    let n_f = n as f64;
    let hops = (n - 1) as f64;
    Ok(2.0 * hops / n_f * param_bytes / bandwidth + 2.0 * hops * link_latency)
}

/// Episode length distribution, in env steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HorizonDist {
    Fixed { steps: u32 },
    /// Geometric on `1..` with success probability `p`, conditioned on `<= max`.
    TruncatedGeometric { p: f64, max: u32 },
}

impl HorizonDist {
    pub fn max_horizon(&self) -> u32 {
        match *self {
            HorizonDist::Fixed { steps } => steps,
            HorizonDist::TruncatedGeometric { max, .. } => max,
        }
    }

    /// Closed-form mean.
    pub fn mean(&self) -> f64 {
        match *self {
            HorizonDist::Fixed { steps } => steps as f64,
            HorizonDist::TruncatedGeometric { p, max } => {
                let q = 1.0 - p;
                let qm = q.powi(max as i32);
                1.0 / p - max as f64 * qm / (1.0 - qm)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeModel {
    pub horizon: HorizonDist,
    /// Env steps executed per inference call.
    pub action_chunk: u32,
    pub samples_per_step: u64,
}

impl EpisodeModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.action_chunk == 0 {
            return Err(invalid("episode.action_chunk", "must be >= 1"));
        }
        if self.samples_per_step == 0 {
            return Err(invalid("episode.samples_per_step", "must be >= 1"));
        }
        match self.horizon {
            HorizonDist::Fixed { steps } if steps == 0 => {
                Err(invalid("episode.horizon.steps", "must be >= 1"))
            }
            HorizonDist::TruncatedGeometric { p, max } if !(p > 0.0 && p <= 1.0) || max == 0 => {
                Err(invalid("episode.horizon", "need 0 < p <= 1 and max >= 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn calls_for(&self, horizon: u32) -> u32 {
        horizon.div_ceil(self.action_chunk)
    }

    pub fn mean_samples(&self) -> f64 {
        self.horizon.mean() * self.samples_per_step as f64
    }
}

/// Draw one episode length. Deterministic for a given rng state, always in `[1, max]`.
pub fn sample_episode_length<R: Rng + ?Sized>(model: &EpisodeModel, rng: &mut R) -> u32 {
    match model.horizon {
        HorizonDist::Fixed { steps } => steps,
        HorizonDist::TruncatedGeometric { p, max } => {
            if p >= 1.0 {
                return 1;
            }
            // inverse CDF of the truncated geometric
            let q = 1.0 - p;
            let mass = 1.0 - q.powi(max as i32);
            let u: f64 = rng.random();
            let k = ((1.0 - u * mass).ln() / q.ln()).ceil();
            (k as u32).clamp(1, max)
        }
    }
}

/// Data-parallel training shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    /// Mini-batch size per data-parallel instance.
    pub mbs: u64,
    /// Number of data-parallel instances.
    pub dp: usize,
    /// Samples per epoch.
    pub dataset_size: u64,
}

impl ScalingConfig {
    pub fn gbs(&self) -> u64 {
        self.mbs * self.dp as u64
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.dataset_size.div_ceil(self.gbs())
    }
}

/// Per-step training cost for DDP: compute on `mbs` samples plus allreduce across `dp`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpCostModel {
    pub train: Affine,
    pub network: NetworkModel,
}

impl DdpCostModel {
    pub fn step_time(&self, mbs: u64, dp: usize) -> f64 {
        self.train.eval(mbs as f64) + self.network.allreduce(dp)
    }
}

/// `steps_per_epoch * (train_latency(mbs) + allreduce(dp))`, in seconds.
pub fn ddp_epoch_time(scaling: &ScalingConfig, cost: &DdpCostModel) -> f64 {
    scaling.steps_per_epoch() as f64 * cost.step_time(scaling.mbs, scaling.dp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn allreduce_edge_cases() {
        assert_eq!(allreduce_time(1e9, 1, 1e9, 1e-3).unwrap(), 0.0);
        assert_eq!(allreduce_time(8e9, 2, 4e9, 0.0).unwrap(), 2.0);
        assert!(matches!(
            allreduce_time(1.0, 4, 0.0, 0.0),
            Err(ModelError::NonPositiveBandwidth(_))
        ));
        let t4 = allreduce_time(1e9, 4, 1e9, 1e-3).unwrap();
        assert!((t4 - (1.5 + 6e-3)).abs() < 1e-12);
    }

    #[test]
    fn ddp_time_inverse_in_dp_without_comm() {
        let cost = DdpCostModel {
            train: Affine::new(0.2, 0.01),
            network: NetworkModel {
                param_bytes: 0.0,
                bandwidth: 1.0,
                link_latency: 0.0,
                contention: 0.0,
            },
        };
        let base = ScalingConfig { mbs: 64, dp: 8, dataset_size: 64 * 8 * 1000 };
        let t8 = ddp_epoch_time(&base, &cost);
        let t16 = ddp_epoch_time(&ScalingConfig { dp: 16, ..base }, &cost);
        assert_eq!(t8, 2.0 * t16);
    }

    #[test]
    fn fixed_horizon_is_constant() {
        let m = EpisodeModel {
            horizon: HorizonDist::Fixed { steps: 50 },
            action_chunk: 5,
            samples_per_step: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..100).all(|_| sample_episode_length(&m, &mut rng) == 50));
        assert_eq!(m.calls_for(50), 10);
        assert_eq!(m.calls_for(51), 11);
    }

    #[test]
    fn truncated_geometric_mean_matches_direct_sum() {
        let (p, max) = (0.02f64, 500u32);
        // independent route: sum the pmf
        let q = 1.0 - p;
        let norm: f64 = (1..=max).map(|k| p * q.powi(k as i32 - 1)).sum();
        let direct: f64 = (1..=max).map(|k| k as f64 * p * q.powi(k as i32 - 1)).sum::<f64>() / norm;
        let d = HorizonDist::TruncatedGeometric { p, max };
        assert!((d.mean() - direct).abs() < 1e-9);

        let m = EpisodeModel { horizon: d, action_chunk: 1, samples_per_step: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = 0u64;
        for _ in 0..n {
            let h = sample_episode_length(&m, &mut rng);
            assert!((1..=max).contains(&h));
            sum += h as u64;
        }
        let emp = sum as f64 / n as f64;
        assert!((emp - direct).abs() / direct < 0.05, "{emp} vs {direct}");
    }

    #[test]
    fn same_seed_same_lengths() {
        let m = EpisodeModel {
            horizon: HorizonDist::TruncatedGeometric { p: 0.1, max: 40 },
            action_chunk: 4,
            samples_per_step: 2,
        };
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64).map(|_| sample_episode_length(&m, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn gpu_split_strictly_costs_more() {
        let env = EnvModel::GpuBatched { alpha: 0.05, beta: 0.001 };
        let one = env.split_compute(64, 1, 4);
        let four = env.split_compute(64, 4, 4);
        assert!(four > one);
        assert!((four - one - 3.0 * 4.0 * 0.05).abs() < 1e-12);
        let cpu = EnvModel::CpuPerEnv { step_cost: 0.01, jitter: 0.0 };
        assert_eq!(cpu.split_compute(64, 1, 4), cpu.split_compute(64, 4, 4));
    }

    #[test]
    fn cost_functions_monotone() {
        let c = CostModel {
            inference: Affine::new(0.01, 0.002),
            train: Affine::new(0.1, 0.01),
            env: EnvModel::GpuBatched { alpha: 0.02, beta: 0.001 },
            sync_overhead: 0.0,
            weight_load: 0.0,
            per_worker_comm: 0.0,
        };
        c.validate().unwrap();
        for b in 1..100 {
            assert!(c.inference_latency(b + 1) >= c.inference_latency(b));
            assert!(c.train_compute(b as u64 + 1, 2) >= c.train_compute(b as u64, 2));
            assert!(
                EnvModel::gpu_batch_time(0.02, 0.001, b + 1, 1)
                    >= EnvModel::gpu_batch_time(0.02, 0.001, b, 1)
            );
        }
        let net = NetworkModel { param_bytes: 1e9, bandwidth: 1e10, link_latency: 1e-4, contention: 1e-6 };
        for n in 1..300 {
            assert!(net.allreduce(n + 1) >= net.allreduce(n));
        }
    }

    #[test]
    fn validation_rejects_bad_models() {
        let mut c = CostModel {
            inference: Affine::new(0.0, 0.0),
            train: Affine::ZERO,
            env: EnvModel::CpuPerEnv { step_cost: 0.1, jitter: 0.0 },
            sync_overhead: 0.0,
            weight_load: 0.0,
            per_worker_comm: 0.0,
        };
        assert!(c.validate().is_err());
        c.inference = Affine::new(0.1, 0.0);
        assert!(c.validate().is_ok());
        c.train = Affine::new(-1.0, 0.0);
        assert!(c.validate().is_err());
    }
}
