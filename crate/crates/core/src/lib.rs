//! Simulation and analysis toolkit for asynchronous vision-language-action RL
//! training pipelines.
//!
//! - [`pipeline`]: policy store, trajectories, bounded pipe, batch trigger.
//! - [`strategies`]: colocated / disaggregated placements and the asynchrony
//!   ladder, expressed as worker programs; the dynamic inference batcher.
//! - [`workload`]: parametric cost models, presets and calibration.
//! - [`packing`]: sequence packing planners, padding analytics, varlen attention reference.
//! - [`quant`]: FP8 E4M3 quantization emulation and the compression calculator.
//! - [`sim`]: virtual-time and live executors, sweeps, metrics, event log.

pub mod packing;
pub mod pipeline;
pub mod quant;
pub mod rng;
pub mod sim;
pub mod strategies;
pub mod workload;
