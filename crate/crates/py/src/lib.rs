//! Python bindings. Results cross the boundary as plain dicts and lists
//! (serialized through JSON), so nothing on the Python side depends on Rust
//! types.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

use rlvla_core::packing::{self, PackAlgorithm};
use rlvla_core::quant::{self, Fp8Format, Granularity, ModelSizeSpec, Tensor};
use rlvla_core::sim::{self, RunConfig, SimError, Termination};
use rlvla_core::strategies::{Ladder, StrategyConfig};
use rlvla_core::workload::{DdpPreset, WorkloadPreset, BUILTIN_DDP, BUILTIN_WORKLOADS};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sim_err(e: SimError) -> PyErr {
    if e.is_config() {
        value_err(e)
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn run_config(preset: &str, strategy: &str, devices: usize, seed: u64, updates: u64) -> PyResult<RunConfig> {
    let p = WorkloadPreset::resolve(preset).map_err(value_err)?;
    let rung = Ladder::parse(strategy).ok_or_else(|| value_err(format!("unknown strategy `{strategy}`")))?;
    let mut cfg = RunConfig::new(p.clone(), StrategyConfig::ladder(rung, &p), devices, seed);
    cfg.termination = Termination::Updates(updates);
    Ok(cfg)
}

/// Names of the builtin workload and data-parallel presets.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    BUILTIN_WORKLOADS.iter().chain(BUILTIN_DDP).map(|(n, _)| *n).collect()
}

/// Run one ladder rung under the virtual-time executor; returns the metrics report.
#[pyfunction]
#[pyo3(signature = (preset, strategy, devices, seed = 1, updates = 12))]
fn simulate<'py>(
    py: Python<'py>,
    preset: &str,
    strategy: &str,
    devices: usize,
    seed: u64,
    updates: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = run_config(preset, strategy, devices, seed, updates)?;
    let report = py.allow_threads(|| sim::run(&cfg)).map_err(sim_err)?;
    to_py(py, &report)
}

/// Throughput of every rung at each device count: `{strategy: [throughput, ...]}`.
#[pyfunction]
#[pyo3(signature = (preset, devices, seed = 1, updates = 12))]
fn ladder<'py>(
    py: Python<'py>,
    preset: &str,
    devices: Vec<usize>,
    seed: u64,
    updates: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let mut out = std::collections::BTreeMap::new();
    for rung in Ladder::ALL {
        let mut row = Vec::new();
        for &n in &devices {
            let cfg = run_config(preset, rung.name(), n, seed, updates)?;
            row.push(py.allow_threads(|| sim::run(&cfg)).map_err(sim_err)?.throughput);
        }
        out.insert(rung.name(), row);
    }
    to_py(py, &out)
}

/// Seconds per epoch of a data-parallel preset.
#[pyfunction]
#[pyo3(signature = (dp, mbs, preset = "ddp_gr00t"))]
fn epoch_time(dp: usize, mbs: u64, preset: &str) -> PyResult<f64> {
    if dp == 0 || mbs == 0 {
        return Err(value_err("dp and mbs must be >= 1"));
    }
    Ok(DdpPreset::builtin(preset).map_err(value_err)?.epoch_time(dp, mbs))
}

/// Nearest E4M3 value (round half to even, saturating at +-448).
#[pyfunction]
fn fp8_round(x: f64) -> PyResult<f64> {
    if !x.is_finite() {
        return Err(value_err("value must be finite"));
    }
    Ok(Fp8Format::round(x))
}

#[derive(Serialize)]
struct QuantSummary {
    granularity: String,
    scales: Vec<f64>,
    scale_shape: Vec<usize>,
    dequantized: Vec<f64>,
    mse: f64,
    max_rel_error: f64,
}

/// Quantize a row-major tensor. Returns `(codes, summary)` where `codes` are
/// the raw E4M3 bytes.
#[pyfunction]
#[pyo3(signature = (values, shape, granularity = "per_tensor"))]
fn quantize<'py>(
    py: Python<'py>,
    values: Vec<f64>,
    shape: Vec<usize>,
    granularity: &str,
) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyAny>)> {
    let g = Granularity::parse(granularity).map_err(value_err)?;
    let t = Tensor::new(shape, values).map_err(value_err)?;
    let q = quant::quantize(&t, g).map_err(value_err)?;
    let e = quant::quant_error(&t, &q).map_err(value_err)?;
    let summary = QuantSummary {
        granularity: g.label(),
        scales: q.scales.clone(),
        scale_shape: q.scale_shape.clone(),
        dequantized: quant::dequantize(&q).map_err(value_err)?.data,
        mse: e.mse,
        max_rel_error: e.max_rel_error,
    };
    Ok((PyBytes::new(py, &q.codes), to_py(py, &summary)?))
}

/// Percent size reduction of a builtin model after FP8 quantization.
#[pyfunction]
#[pyo3(signature = (model = "qwen25vl_3b"))]
fn compression_ratio(model: &str) -> PyResult<f64> {
    let spec = ModelSizeSpec::builtin(model).map_err(value_err)?;
    quant::compression_ratio(&spec).map_err(value_err)
}

/// Pack sample lengths into rows of `capacity` tokens. Returns one list of
/// sample indices per row.
#[pyfunction]
#[pyo3(signature = (lengths, capacity, algorithm = "ffd"))]
fn pack(lengths: Vec<u64>, capacity: u64, algorithm: &str) -> PyResult<Vec<Vec<usize>>> {
    let algo = match algorithm {
        "ffd" => PackAlgorithm::Ffd,
        "greedy" => PackAlgorithm::Greedy,
        other => return Err(value_err(format!("unknown algorithm `{other}`"))),
    };
    let items: Vec<(String, u64)> = lengths.iter().enumerate().map(|(i, &l)| (i.to_string(), l)).collect();
    let bins = packing::pack(&items, capacity, algo).map_err(value_err)?;
    Ok(bins
        .iter()
        .map(|b| b.members.iter().map(|(id, _)| id.parse().expect("index id")).collect())
        .collect())
}

/// Prefix offsets with a leading zero.
#[pyfunction]
fn cu_seqlens(lengths: Vec<u64>) -> Vec<u64> {
    packing::cu_seqlens(&lengths)
}

#[pymodule]
fn rlvla(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(ladder, m)?)?;
    m.add_function(wrap_pyfunction!(epoch_time, m)?)?;
    m.add_function(wrap_pyfunction!(fp8_round, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(compression_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(pack, m)?)?;
    m.add_function(wrap_pyfunction!(cu_seqlens, m)?)?;
    Ok(())
}
