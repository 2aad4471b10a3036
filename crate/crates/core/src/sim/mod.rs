//! Executors for worker programs: a deterministic virtual-time kernel and a
//! live multi-threaded executor, plus run configuration, sweeps and metrics.

mod kernel;
mod live;
pub mod log;
pub mod metrics;
pub mod program;

pub use live::{run_live, LiveOptions};
pub use log::{EventLog, LogRecord};
pub use metrics::{DeviceMetrics, MetricsCollector, MetricsReport, CSV_HEADER};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PipelineError;
use crate::strategies::{schedule, Plan, StrategyConfig, StrategyError};
use crate::workload::WorkloadPreset;

use kernel::Kernel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("deadlock at t={time}: {}", blocked.join("; "))]
    Deadlock { time: f64, blocked: Vec<String> },
    #[error("watchdog: no progress for {seconds:.1}s; hung workers: {}", hung.join("; "))]
    Watchdog { seconds: f64, hung: Vec<String> },
    #[error("worker threads panicked: {}", .0.join(", "))]
    Panic(Vec<String>),
}

impl SimError {
    /// Configuration problems as opposed to failures while running.
    pub fn is_config(&self) -> bool {
        matches!(self, SimError::Config(_) | SimError::Strategy(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Stop after this many policy updates.
    Updates(u64),
    /// Stop once this many samples have been trained. Update boundaries are
    /// whole global batches, so the run ends on the update that crosses the budget.
    Samples(u64),
    /// Stop at this simulated time (seconds).
    Duration(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub device_count: usize,
    pub strategy: StrategyConfig,
    pub preset: WorkloadPreset,
    pub termination: Termination,
    /// Pipe capacity in trajectories; defaults to four rounds of episodes.
    pub pipe_capacity: Option<usize>,
    /// Queue-depth sampling period in simulated seconds.
    pub metrics_resolution: f64,
    pub total_envs: Option<usize>,
    pub global_batch_samples: Option<u64>,
    /// Updates excluded from the steady-state throughput.
    pub warmup_updates: u64,
}

impl RunConfig {
    pub fn new(preset: WorkloadPreset, strategy: StrategyConfig, device_count: usize, seed: u64) -> Self {
        Self {
            seed,
            device_count,
            strategy,
            preset,
            termination: Termination::Updates(12),
            pipe_capacity: None,
            metrics_resolution: 1.0,
            total_envs: None,
            global_batch_samples: None,
            warmup_updates: 2,
        }
    }

    pub fn plan(&self) -> Result<Plan, SimError> {
        if !(self.metrics_resolution > 0.0) {
            return Err(SimError::Config("metrics_resolution must be > 0".into()));
        }
        match self.termination {
            Termination::Updates(0) | Termination::Samples(0) => {
                return Err(SimError::Config("termination budget must be >= 1".into()))
            }
            Termination::Duration(d) if !(d > 0.0) => {
                return Err(SimError::Config("termination duration must be > 0".into()))
            }
            _ => {}
        }
        Ok(Plan::new(
            self.strategy,
            self.preset.clone(),
            self.device_count,
            self.total_envs,
            self.global_batch_samples,
            self.pipe_capacity,
        )?)
    }
}

/// Run under the virtual-time executor.
pub fn run(config: &RunConfig) -> Result<MetricsReport, SimError> {
    run_inner(config, false).map(|(r, _)| r)
}

/// Run under the virtual-time executor and also return the event log.
pub fn run_logged(config: &RunConfig) -> Result<(MetricsReport, EventLog), SimError> {
    run_inner(config, true).map(|(r, l)| (r, l.unwrap_or_default()))
}

fn run_inner(config: &RunConfig, log: bool) -> Result<(MetricsReport, Option<EventLog>), SimError> {
    let plan = config.plan()?;
    let sched = schedule(&plan, config.seed);
    let metrics = MetricsCollector::new(plan.device_count, config.metrics_resolution, config.warmup_updates);
    let mut kernel = Kernel::new(
        sched.workers,
        &sched.batchers,
        plan.device_count,
        plan.pipe_capacity,
        config.termination,
        metrics,
        log,
    );
    kernel.run()?;
    let now = kernel.now();
    let residual = kernel.residual();
    let roles = plan.device_roles();
    let log = kernel.log.take();
    let report = kernel.metrics.clone().finish(
        "virtual",
        plan.strategy.label(),
        &plan.preset.name,
        config.seed,
        plan.total_envs,
        plan.global_batch_samples,
        &roles,
        now,
        residual,
    );
    Ok((report, log))
}

/// One row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub device_count: usize,
    pub strategy: String,
    pub preset: String,
    pub throughput: Option<f64>,
    /// `throughput_n / (n * throughput_base / base)` against the first successful row.
    pub scaling_efficiency: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub report: Option<MetricsReport>,
}

pub const SWEEP_CSV_HEADER: &str = "device_count,strategy,preset,throughput,scaling_efficiency,error";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.device_count,
            self.strategy,
            self.preset,
            f(self.throughput),
            f(self.scaling_efficiency),
            self.error.as_deref().unwrap_or("").replace(',', ";")
        )
    }
}

/// Run every config; failures are recorded per row and the sweep continues.
pub fn sweep(configs: &[RunConfig]) -> Vec<SweepRow> {
    let mut base: Option<(usize, f64)> = None;
    configs
        .iter()
        .map(|c| {
            let result = run(c);
            let mut row = SweepRow {
                device_count: c.device_count,
                strategy: c.strategy.label().to_string(),
                preset: c.preset.name.clone(),
                throughput: None,
                scaling_efficiency: None,
                error: None,
                report: None,
            };
            match result {
                Ok(r) => {
                    let (n0, t0) = *base.get_or_insert((c.device_count, r.throughput));
                    row.throughput = Some(r.throughput);
                    row.scaling_efficiency = Some(scaling_efficiency(n0, t0, c.device_count, r.throughput));
                    row.report = Some(r);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}

pub fn scaling_efficiency(base_n: usize, base_throughput: f64, n: usize, throughput: f64) -> f64 {
    throughput / (n as f64 * base_throughput / base_n as f64)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
