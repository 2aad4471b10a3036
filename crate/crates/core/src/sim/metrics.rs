//! Run metrics shared by both executors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::pipeline::TrainBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceMetrics {
    pub device: usize,
    pub role: String,
    pub busy_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub executor: String,
    pub strategy: String,
    pub preset: String,
    pub device_count: usize,
    pub seed: u64,
    pub total_envs: usize,
    pub global_batch_samples: u64,
    /// Trained samples per simulated second, measured after the warm-up updates.
    pub throughput: f64,
    /// Trained samples over the whole run, divided by the time of the last update.
    pub raw_throughput: f64,
    pub updates: u64,
    pub trained_samples: u64,
    pub sim_time: f64,
    pub update_times: Vec<f64>,
    pub devices: Vec<DeviceMetrics>,
    pub trainer_idle_fraction: f64,
    pub staleness_histogram: BTreeMap<u64, u64>,
    /// `(time, depth)` sampled on a fixed grid.
    pub queue_depth: Vec<(f64, usize)>,
    pub max_queue_depth: usize,
    pub batch_sizes: BTreeMap<usize, u64>,
    pub max_batch: usize,
    pub max_batch_wait: f64,
    pub trajectories_produced: u64,
    pub trajectories_consumed: u64,
    pub trajectories_residual: u64,
    pub residual_samples: u64,
}

pub const CSV_HEADER: &str = "executor,strategy,preset,device_count,seed,total_envs,global_batch_samples,throughput,raw_throughput,updates,trained_samples,sim_time,mean_busy_fraction,trainer_idle_fraction,mean_staleness,max_queue_depth,max_batch,max_batch_wait,trajectories_produced,trajectories_consumed,trajectories_residual,residual_samples";

impl MetricsReport {
    pub fn mean_busy_fraction(&self) -> f64 {
        if self.devices.is_empty() {
            return 0.0;
        }
        self.devices.iter().map(|d| d.busy_fraction).sum::<f64>() / self.devices.len() as f64
    }

    pub fn mean_staleness(&self) -> f64 {
        let n: u64 = self.staleness_histogram.values().sum();
        if n == 0 {
            return 0.0;
        }
        let s: u64 = self.staleness_histogram.iter().map(|(k, v)| k * v).sum();
        s as f64 / n as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// One CSV line matching [`CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.executor,
            self.strategy,
            self.preset,
            self.device_count,
            self.seed,
            self.total_envs,
            self.global_batch_samples,
            self.throughput,
            self.raw_throughput,
            self.updates,
            self.trained_samples,
            self.sim_time,
            self.mean_busy_fraction(),
            self.trainer_idle_fraction,
            self.mean_staleness(),
            self.max_queue_depth,
            self.max_batch,
            self.max_batch_wait,
            self.trajectories_produced,
            self.trajectories_consumed,
            self.trajectories_residual,
            self.residual_samples,
        );
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.csv_row())
    }
}

/// Accumulates run statistics as events happen.
#[derive(Debug, Clone)]
pub struct MetricsCollector {
    resolution: f64,
    warmup_updates: u64,
    next_sample: f64,
    depth: usize,
    pub queue_depth: Vec<(f64, usize)>,
    pub max_queue_depth: usize,
    pub staleness: BTreeMap<u64, u64>,
    pub batch_sizes: BTreeMap<usize, u64>,
    pub max_batch: usize,
    pub max_batch_wait: f64,
    pub produced: u64,
    pub consumed: u64,
    pending_samples: u64,
    pub update_times: Vec<f64>,
    pub update_samples: Vec<u64>,
    device_busy: Vec<f64>,
    trainer_busy: f64,
}

impl MetricsCollector {
    pub fn new(devices: usize, resolution: f64, warmup_updates: u64) -> Self {
        Self {
            resolution: if resolution > 0.0 { resolution } else { 1.0 },
            warmup_updates,
            next_sample: 0.0,
            depth: 0,
            queue_depth: Vec::new(),
            max_queue_depth: 0,
            staleness: BTreeMap::new(),
            batch_sizes: BTreeMap::new(),
            max_batch: 0,
            max_batch_wait: 0.0,
            produced: 0,
            consumed: 0,
            pending_samples: 0,
            update_times: Vec::new(),
            update_samples: Vec::new(),
            device_busy: vec![0.0; devices],
            trainer_busy: 0.0,
        }
    }

    fn sample_until(&mut self, t: f64) {
        while self.next_sample <= t {
            self.queue_depth.push((self.next_sample, self.depth));
            self.next_sample += self.resolution;
        }
    }

    /// Record the pipe depth after a push or pop at time `t`.
    pub fn on_depth(&mut self, t: f64, depth: usize) {
        self.sample_until(t);
        self.depth = depth;
        self.max_queue_depth = self.max_queue_depth.max(depth);
    }

    pub fn on_produced(&mut self) {
        self.produced += 1;
    }

    pub fn on_batch(&mut self, batch: &TrainBatch) {
        self.consumed += batch.trajectories.len() as u64;
        self.pending_samples += batch.total_samples;
        for &s in &batch.staleness {
            *self.staleness.entry(s).or_insert(0) += 1;
        }
    }

    pub fn on_publish(&mut self, t: f64) {
        self.update_times.push(t);
        self.update_samples.push(std::mem::take(&mut self.pending_samples));
    }

    pub fn on_dispatch(&mut self, size: usize, wait: f64) {
        *self.batch_sizes.entry(size).or_insert(0) += 1;
        self.max_batch = self.max_batch.max(size);
        self.max_batch_wait = self.max_batch_wait.max(wait);
    }

    pub fn on_compute(&mut self, devices: &[usize], duration: f64, trainer: bool) {
        for &d in devices {
            if let Some(b) = self.device_busy.get_mut(d) {
                *b += duration;
            }
        }
        if trainer {
            self.trainer_busy += duration;
        }
    }

    pub fn updates(&self) -> u64 {
        self.update_times.len() as u64
    }

    pub fn trained_samples(&self) -> u64 {
        self.update_samples.iter().sum()
    }

    /// Steady-state throughput: samples of the updates after warm-up over the
    /// time between the last warm-up update and the final update.
    pub fn throughput(&self) -> f64 {
        let w = self.warmup_updates as usize;
        let n = self.update_times.len();
        if n > w && w > 0 {
            let t0 = self.update_times[w - 1];
            let t1 = self.update_times[n - 1];
            let s: u64 = self.update_samples[w..].iter().sum();
            if t1 > t0 {
                return s as f64 / (t1 - t0);
            }
        }
        self.raw_throughput()
    }

    pub fn raw_throughput(&self) -> f64 {
        match self.update_times.last() {
            Some(&t) if t > 0.0 => self.trained_samples() as f64 / t,
            _ => 0.0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn finish(
        mut self,
        executor: &str,
        strategy: &str,
        preset: &str,
        seed: u64,
        total_envs: usize,
        global_batch_samples: u64,
        roles: &[&str],
        sim_time: f64,
        residual: (u64, u64),
    ) -> MetricsReport {
        self.sample_until(sim_time);
        let span = if sim_time > 0.0 { sim_time } else { 1.0 };
        let devices = self
            .device_busy
            .iter()
            .enumerate()
            .map(|(d, &b)| DeviceMetrics {
                device: d,
                role: roles.get(d).copied().unwrap_or("idle").to_string(),
                busy_fraction: (b / span).clamp(0.0, 1.0),
            })
            .collect();
        let trainer_idle_fraction = (1.0 - self.trainer_busy / span).clamp(0.0, 1.0);
        MetricsReport {
            executor: executor.to_string(),
            strategy: strategy.to_string(),
            preset: preset.to_string(),
            device_count: roles.len(),
            seed,
            total_envs,
            global_batch_samples,
            throughput: self.throughput(),
            raw_throughput: self.raw_throughput(),
            updates: self.updates(),
            trained_samples: self.trained_samples(),
            sim_time,
            update_times: self.update_times.clone(),
            devices,
            trainer_idle_fraction,
            staleness_histogram: self.staleness,
            queue_depth: self.queue_depth,
            max_queue_depth: self.max_queue_depth,
            batch_sizes: self.batch_sizes,
            max_batch: self.max_batch,
            max_batch_wait: self.max_batch_wait,
            trajectories_produced: self.produced,
            trajectories_consumed: self.consumed,
            trajectories_residual: residual.0,
            residual_samples: residual.1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steady_state_throughput_skips_warmup() {
        let mut m = MetricsCollector::new(1, 1.0, 1);
        for k in 1..=4 {
            m.pending_samples = 150;
            m.on_publish(5.0 + 10.0 * k as f64);
        }
        assert_eq!(m.throughput(), 15.0);
        assert!((m.raw_throughput() - 600.0 / 45.0).abs() < 1e-12);
    }

    #[test]
    fn depth_sampled_on_grid() {
        let mut m = MetricsCollector::new(1, 1.0, 1);
        m.on_depth(0.5, 1);
        m.on_depth(2.5, 0);
        assert_eq!(m.queue_depth, vec![(0.0, 0), (1.0, 1), (2.0, 1)]);
        assert_eq!(m.max_queue_depth, 1);
    }
}
