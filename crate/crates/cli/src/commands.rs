use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use rlvla_core::packing::{self, PackAlgorithm, PackedSequence, PackingError, PackingPreset, PackingStats};
use rlvla_core::quant::{self, Granularity, ModelSizeSpec, QuantError, Tensor};
use rlvla_core::sim::{self, EventLog, LiveOptions, MetricsReport, RunConfig, SweepRow, CSV_HEADER};
use rlvla_core::strategies::{Ladder, Placement, StrategyConfig};
use rlvla_core::workload::{self, Coefficient, WorkloadPreset};

use crate::config::{Executor, ExperimentConfig, RunSection, SyntheticFixture};
use crate::{CliError, Context};

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Expand a run section into one config per (strategy, device count),
/// strategy-major.
pub fn build_runs(section: &RunSection, seed: u64) -> Result<Vec<RunConfig>, CliError> {
    let mut preset = WorkloadPreset::resolve(&section.preset).map_err(config_err)?;
    if let Some(b) = &section.batcher {
        let ra = &mut preset.rollout_async;
        ra.b_max = b.b_max.unwrap_or(ra.b_max);
        ra.t_max = b.t_max.unwrap_or(ra.t_max);
        ra.env_minibatch_size = b.env_minibatch_size.or(ra.env_minibatch_size);
    }
    if let Some(m) = section.micro_batches {
        preset.streamer.micro_batches = m;
    }
    if let Some(c) = section.per_worker_comm {
        preset.cost.per_worker_comm = c;
    }
    preset.validate().map_err(config_err)?;
    if section.devices.is_empty() {
        return Err(CliError::Config("devices must list at least one device count".into()));
    }
    let rungs: Vec<Ladder> = if section.strategies.is_empty() {
        Ladder::ALL.to_vec()
    } else {
        section
            .strategies
            .iter()
            .map(|s| Ladder::parse(s).ok_or_else(|| CliError::Config(format!("unknown strategy `{s}`"))))
            .collect::<Result<_, _>>()?
    };
    let termination = section.termination()?;
    let mut runs = Vec::new();
    for rung in rungs {
        let mut strategy = StrategyConfig::ladder(rung, &preset);
        if let (Some(f), Placement::Disaggregated { .. }) = (section.rollout_fraction, strategy.placement) {
            strategy.placement = Placement::Disaggregated { rollout_fraction: f };
        }
        strategy.validate().map_err(config_err)?;
        for &n in &section.devices {
            let mut cfg = RunConfig::new(preset.clone(), strategy, n, seed);
            if let Some(t) = termination {
                cfg.termination = t;
            }
            cfg.warmup_updates = section.warmup_updates.unwrap_or(cfg.warmup_updates);
            cfg.pipe_capacity = section.pipe_capacity;
            cfg.total_envs = section.total_envs;
            cfg.global_batch_samples = section.global_batch_samples;
            cfg.metrics_resolution = section.metrics_resolution.unwrap_or(cfg.metrics_resolution);
            runs.push(cfg);
        }
    }
    Ok(runs)
}

fn live_options(ctx: &Context, event_log: bool) -> LiveOptions {
    let live = ctx.config.live.clone().unwrap_or_default();
    LiveOptions {
        time_scale: live.time_scale,
        watchdog: Duration::from_secs_f64(live.watchdog_seconds.max(0.1)),
        event_log,
    }
}

fn execute(ctx: &Context, cfg: &RunConfig, log: bool) -> Result<(MetricsReport, Option<EventLog>), CliError> {
    Ok(match ctx.executor {
        Executor::Virtual if log => sim::run_logged(cfg).map(|(r, l)| (r, Some(l)))?,
        Executor::Virtual => (sim::run(cfg)?, None),
        Executor::Live => sim::run_live(cfg, &live_options(ctx, log))?,
    })
}

/// `events.ndjson` becomes `events.streamer.8.ndjson` when several runs share one flag.
fn log_path(base: &Path, cfg: &RunConfig, many: bool) -> PathBuf {
    if !many {
        return base.to_path_buf();
    }
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}.{}.{}.{}", cfg.strategy.label(), cfg.device_count, ext.to_string_lossy()),
        None => format!("{stem}.{}.{}", cfg.strategy.label(), cfg.device_count),
    };
    base.with_file_name(name)
}

/// Rows = strategies, columns = device counts, with the change against `baseline`.
fn ladder_table(reports: &[MetricsReport], baseline: &str) -> String {
    let mut devices: Vec<usize> = reports.iter().map(|r| r.device_count).collect();
    devices.sort_unstable();
    devices.dedup();
    let mut strategies: Vec<&str> = Vec::new();
    for r in reports {
        if !strategies.contains(&r.strategy.as_str()) {
            strategies.push(&r.strategy);
        }
    }
    let find = |s: &str, n: usize| reports.iter().find(|r| r.strategy == s && r.device_count == n);
    let mut out = format!("{:<16}", "strategy");
    for n in &devices {
        let _ = write!(out, "{:>20}", format!("{n} devices"));
    }
    out.push('\n');
    for s in strategies {
        let _ = write!(out, "{s:<16}");
        for &n in &devices {
            let cell = match (find(s, n), find(baseline, n)) {
                (Some(r), Some(b)) => format!("{:.1} ({:+.1}%)", r.throughput, 100.0 * (r.throughput / b.throughput - 1.0)),
                (Some(r), None) => format!("{:.1}", r.throughput),
                _ => "-".into(),
            };
            let _ = write!(out, "{cell:>20}");
        }
        out.push('\n');
    }
    out
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let section = ExperimentConfig::section(&ctx.config.run, "run")?;
    let runs = build_runs(section, ctx.seed)?;
    let mut reports = Vec::new();
    for cfg in &runs {
        let (report, log) = execute(ctx, cfg, ctx.event_log.is_some())?;
        if let (Some(base), Some(log)) = (&ctx.event_log, log) {
            let path = log_path(base, cfg, runs.len() > 1);
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            std::fs::write(&path, log.to_ndjson()).map_err(|e| CliError::io(&path, e))?;
        }
        reports.push(report);
    }
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    ctx.write("simulate.json", &(json + "\n"))?;
    let mut csv = format!("{CSV_HEADER}\n");
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    ctx.write("simulate.csv", &csv)?;
    print!("{}", ladder_table(&reports, Ladder::Colocated.name()));
    Ok(())
}

#[derive(Serialize)]
struct SweepOutput<'a> {
    preset: &'a str,
    executor: &'a str,
    seed: u64,
    rows: &'a [SweepRow],
}

pub fn sweep(ctx: &Context) -> Result<(), CliError> {
    let section = ExperimentConfig::section(&ctx.config.sweep, "sweep")?;
    let runs = build_runs(section, ctx.seed)?;
    let mut rows: Vec<SweepRow> = Vec::new();
    // efficiency is relative to the first successful point of each strategy
    let mut base: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for cfg in &runs {
        let label = cfg.strategy.label();
        let mut row = SweepRow {
            device_count: cfg.device_count,
            strategy: label.to_string(),
            preset: cfg.preset.name.clone(),
            throughput: None,
            scaling_efficiency: None,
            error: None,
            report: None,
        };
        match execute(ctx, cfg, false) {
            Ok((r, _)) => {
                let (n0, t0) = *base.entry(label).or_insert((cfg.device_count, r.throughput));
                row.throughput = Some(r.throughput);
                row.scaling_efficiency = Some(sim::scaling_efficiency(n0, t0, cfg.device_count, r.throughput));
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    ctx.write("sweep.csv", &sim::sweep_csv(&rows))?;
    let executor = match ctx.executor {
        Executor::Virtual => "virtual",
        Executor::Live => "live",
    };
    let doc = SweepOutput { preset: &runs[0].preset.name, executor, seed: ctx.seed, rows: &rows };
    ctx.write("sweep.json", &(serde_json::to_string_pretty(&doc).expect("sweep serializes") + "\n"))?;
    println!("{:<16}{:>8}{:>14}{:>12}  error", "strategy", "devices", "throughput", "efficiency");
    for r in &rows {
        println!(
            "{:<16}{:>8}{:>14}{:>12}  {}",
            r.strategy,
            r.device_count,
            r.throughput.map(|t| format!("{t:.2}")).unwrap_or_else(|| "-".into()),
            r.scaling_efficiency.map(|e| format!("{e:.3}")).unwrap_or_else(|| "-".into()),
            r.error.as_deref().unwrap_or("")
        );
    }
    if rows.iter().all(|r| r.error.is_some()) {
        return Err(CliError::Runtime("every sweep point failed".into()));
    }
    Ok(())
}

fn packing_err(e: PackingError) -> CliError {
    match e {
        PackingError::Corpus { .. } => CliError::Config(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

#[derive(Serialize)]
struct PackOutput<'a> {
    source: String,
    algorithm: PackAlgorithm,
    capacity: u64,
    pad_to: u64,
    dim: u64,
    pruned_view: Option<&'a str>,
    stats: PackingStats,
    throughput_proxy: f64,
}

pub fn pack(ctx: &Context) -> Result<(), CliError> {
    let section = ExperimentConfig::section(&ctx.config.packing, "packing")?;
    let (source, samples, preset) = match (&section.corpus, &section.preset) {
        (Some(path), None) => (path.display().to_string(), packing::read_corpus(path).map_err(packing_err)?, None),
        (None, Some(name)) => {
            let p = PackingPreset::builtin(name).map_err(config_err)?;
            (format!("preset:{name}"), p.generate(), Some(p))
        }
        _ => return Err(CliError::Config("[packing] needs exactly one of `corpus` or `preset`".into())),
    };
    let capacity = section
        .capacity
        .or(preset.as_ref().map(|p| p.capacity))
        .ok_or_else(|| CliError::Config("[packing] capacity is required with a corpus file".into()))?;
    let pad_to = section.pad_to.or(preset.as_ref().map(|p| p.pad_to)).unwrap_or(capacity);
    let dim = section.dim.or(preset.as_ref().map(|p| p.dim)).unwrap_or(2048);
    if capacity == 0 || dim == 0 {
        return Err(CliError::Config("capacity and dim must be >= 1".into()));
    }
    let samples = match &section.prune_view {
        Some(v) => packing::prune_corpus(&samples, v).map_err(packing_err)?,
        None => samples,
    };
    let bins = packing::pack(&packing::items(&samples), capacity, section.algorithm).map_err(packing_err)?;
    let stats = packing::packing_stats(&bins, pad_to, dim).map_err(packing_err)?;
    let proxy = packing::throughput_proxy(&bins, pad_to, dim);

    ctx.write("pack_manifest.csv", &manifest_csv(&bins))?;
    ctx.write("pack_bins.json", &(serde_json::to_string_pretty(&bins).expect("bins serialize") + "\n"))?;
    let doc = PackOutput {
        source,
        algorithm: section.algorithm,
        capacity,
        pad_to,
        dim,
        pruned_view: section.prune_view.as_deref(),
        stats: stats.clone(),
        throughput_proxy: proxy,
    };
    ctx.write("pack_stats.json", &(serde_json::to_string_pretty(&doc).expect("stats serialize") + "\n"))?;
    println!("samples              {}", stats.samples);
    println!("bins                 {}", stats.bins_used);
    println!("fill rate            {:.4}", stats.fill_rate);
    println!("padding before/after {:.4} / {:.4}", stats.padding_rate_before, stats.padding_rate_after);
    println!("attention flops      {:.4e} fixed, {:.4e} packed", stats.attention_flops_fixed, stats.attention_flops_packed);
    println!("throughput proxy     {proxy:.3}x");
    Ok(())
}

fn manifest_csv(bins: &[PackedSequence]) -> String {
    let mut s = String::from("bin,position,id,length,offset\n");
    for (b, bin) in bins.iter().enumerate() {
        for (i, (id, len)) in bin.members.iter().enumerate() {
            let _ = writeln!(s, "{b},{i},{id},{len},{}", bin.cu_seqlens[i]);
        }
    }
    s
}

fn synthetic(f: &SyntheticFixture) -> Result<Tensor, CliError> {
    if f.shape.is_empty() || f.shape.contains(&0) {
        return Err(CliError::Config(format!("fixture `{}`: shape must be nonempty with nonzero dims", f.name)));
    }
    if !(f.sd > 0.0 && f.row_spread > 0.0) {
        return Err(CliError::Config(format!("fixture `{}`: sd and row_spread must be > 0", f.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(f.seed);
    let row = *f.shape.last().expect("nonempty");
    let n: usize = f.shape.iter().product();
    let rows = n / row;
    let data = (0..n)
        .map(|i| {
            let t = if rows > 1 { (i / row) as f64 / (rows - 1) as f64 } else { 0.0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            z * f.sd * f.row_spread.powf(t)
        })
        .collect();
    Tensor::new(f.shape.clone(), data).map_err(|e| CliError::Config(format!("fixture `{}`: {e}", f.name)))
}

fn row_rel_rmse(t: &Tensor, d: &Tensor) -> f64 {
    let row = *t.shape.last().expect("nonempty shape");
    let rows: Vec<f64> = t
        .data
        .chunks(row)
        .zip(d.data.chunks(row))
        .filter_map(|(a, b)| {
            let energy: f64 = a.iter().map(|x| x * x).sum();
            let err: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            (energy > 0.0).then(|| (err / energy).sqrt())
        })
        .collect();
    rows.iter().sum::<f64>() / rows.len().max(1) as f64
}

fn quant_err(e: QuantError) -> CliError {
    match e {
        QuantError::Io { .. } => CliError::Config(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

#[derive(Serialize)]
struct QuantRow {
    fixture: String,
    shape: String,
    granularity: String,
    groups: usize,
    mse: f64,
    max_rel_error: f64,
    max_rel_error_all: f64,
    /// Relative RMS error of each last-axis row, averaged over rows.
    row_rel_rmse: f64,
    /// FP8 codes plus fp32 scales over the bf16 size.
    size_vs_bf16: f64,
}

#[derive(Serialize)]
struct ComponentRow {
    name: String,
    params: u64,
    quantized: bool,
    bytes_before: f64,
    bytes_after: f64,
}

#[derive(Serialize)]
struct CompressionOutput {
    model: String,
    components: Vec<ComponentRow>,
    bytes_before: f64,
    bytes_after: f64,
    reduction_percent: f64,
}

fn load_model(name: &str) -> Result<ModelSizeSpec, CliError> {
    match ModelSizeSpec::builtin(name) {
        Ok(m) => Ok(m),
        Err(_) if Path::new(name).exists() => {
            let text = std::fs::read_to_string(name).map_err(|e| CliError::Config(format!("{name}: {e}")))?;
            ModelSizeSpec::parse(&text).map_err(|e| CliError::Config(format!("{name}: {e}")))
        }
        Err(e) => Err(config_err(e)),
    }
}

pub fn quantbench(ctx: &Context) -> Result<(), CliError> {
    let section = ExperimentConfig::section(&ctx.config.quantization, "quantization")?;
    let granularities = section
        .granularities
        .iter()
        .map(|g| Granularity::parse(g).map_err(config_err))
        .collect::<Result<Vec<_>, _>>()?;
    let model = section.model.as_deref().map(load_model).transpose()?;
    if section.fixtures.is_empty() && section.synthetic.is_empty() && model.is_none() {
        return Err(CliError::Config("[quantization] has no fixtures, synthetic tensors or model".into()));
    }
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for path in &section.fixtures {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        tensors.push((name, quant::read_any(path).map_err(quant_err)?));
    }
    for f in &section.synthetic {
        tensors.push((f.name.clone(), synthetic(f)?));
    }

    let mut rows = Vec::new();
    for (name, t) in &tensors {
        let shape = t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        for g in &granularities {
            let q = quant::quantize(t, *g).map_err(|e| CliError::Runtime(format!("{name} {}: {e}", g.label())))?;
            let e = quant::quant_error(t, &q).map_err(quant_err)?;
            if section.write_quantized {
                let file = format!("{name}.{}.q8", g.label().replace([':', 'x'], "_"));
                std::fs::create_dir_all(&ctx.out).map_err(|e| CliError::io(&ctx.out, e))?;
                quant::write_quantized(&ctx.out.join(file), &q).map_err(quant_err)?;
            }
            rows.push(QuantRow {
                fixture: name.clone(),
                shape: shape.clone(),
                granularity: g.label(),
                groups: q.scales.len(),
                mse: e.mse,
                max_rel_error: e.max_rel_error,
                max_rel_error_all: e.groups.iter().map(|g| g.max_rel_error_all).fold(0.0, f64::max),
                row_rel_rmse: row_rel_rmse(t, &quant::dequantize(&q).map_err(quant_err)?),
                size_vs_bf16: (t.len() as f64 + 4.0 * q.scales.len() as f64) / (2.0 * t.len() as f64),
            });
        }
    }
    let mut csv = String::from("fixture,shape,granularity,groups,mse,max_rel_error,max_rel_error_all,row_rel_rmse,size_vs_bf16\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.fixture,
            r.shape,
            r.granularity,
            r.groups,
            r.mse,
            r.max_rel_error,
            r.max_rel_error_all,
            r.row_rel_rmse,
            r.size_vs_bf16
        );
    }
    if !rows.is_empty() {
        ctx.write("quantbench.csv", &csv)?;
        ctx.write("quantbench.json", &(serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"))?;
        println!("{:<16}{:<20}{:>8}{:>14}{:>12}{:>12}", "fixture", "granularity", "groups", "mse", "max rel", "row rmse");
        for r in &rows {
            println!(
                "{:<16}{:<20}{:>8}{:>14.4e}{:>12.5}{:>12.5}",
                r.fixture, r.granularity, r.groups, r.mse, r.max_rel_error, r.row_rel_rmse
            );
        }
    }

    if let Some(m) = model {
        let per_q = m.bytes_lo + m.scale_bytes / m.group_elements as f64;
        let components: Vec<ComponentRow> = m
            .components
            .iter()
            .map(|c| ComponentRow {
                name: c.name.clone(),
                params: c.params,
                quantized: c.quantize,
                bytes_before: c.params as f64 * m.bytes_hi,
                bytes_after: c.params as f64 * if c.quantize { per_q } else { m.bytes_hi },
            })
            .collect();
        let doc = CompressionOutput {
            model: m.name.clone(),
            components,
            bytes_before: m.bytes_before(),
            bytes_after: m.bytes_after(),
            reduction_percent: quant::compression_ratio(&m).map_err(config_err)?,
        };
        let mut csv = String::from("component,params,quantized,bytes_before,bytes_after\n");
        for c in &doc.components {
            let _ = writeln!(csv, "{},{},{},{},{}", c.name, c.params, c.quantized, c.bytes_before, c.bytes_after);
        }
        let _ = writeln!(csv, "total,{},,{},{}", m.components.iter().map(|c| c.params).sum::<u64>(), doc.bytes_before, doc.bytes_after);
        ctx.write("compression.csv", &csv)?;
        ctx.write("compression.json", &(serde_json::to_string_pretty(&doc).expect("compression serializes") + "\n"))?;
        println!(
            "{}: {:.3} GB -> {:.3} GB ({:.2}% smaller)",
            doc.model,
            doc.bytes_before / 1e9,
            doc.bytes_after / 1e9,
            doc.reduction_percent
        );
    }
    Ok(())
}

pub fn calibrate(ctx: &Context) -> Result<(), CliError> {
    let section = ExperimentConfig::section(&ctx.config.calibration, "calibration")?;
    let free = section
        .free
        .as_ref()
        .map(|names| {
            names
                .iter()
                .map(|n| Coefficient::parse(n).ok_or_else(|| CliError::Config(format!("unknown coefficient `{n}`"))))
                .collect::<Result<Vec<_>, _>>()
        })
        .transpose()?;
    let cal = workload::calibrate(&section.preset, &section.observations, free.as_deref()).map_err(config_err)?;
    ctx.write("calibration.json", &(serde_json::to_string_pretty(&cal).expect("calibration serializes") + "\n"))?;
    let toml = match &cal.model {
        workload::CalibratedModel::Workload(p) => p.to_toml(),
        workload::CalibratedModel::Ddp(p) => p.to_toml(),
    };
    ctx.write(&format!("{}.calibrated.toml", cal.preset), &toml)?;
    for (c, v) in &cal.fitted {
        println!("{:<22}{v:.6e}", c.name());
    }
    for c in &cal.pinned_at_zero {
        println!("{:<22}pinned at 0", c.name());
    }
    println!("max relative error    {:.3}%", 100.0 * cal.max_relative_error());
    Ok(())
}

fn load_reports(path: &Path) -> Result<Vec<MetricsReport>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Ok(many) = serde_json::from_str::<Vec<MetricsReport>>(&text) {
        return Ok(many);
    }
    MetricsReport::from_json(&text)
        .map(|r| vec![r])
        .map_err(|e| CliError::Config(format!("{}: not a metrics report: {e}", path.display())))
}

pub fn report(ctx: &Context, extra: &[PathBuf]) -> Result<(), CliError> {
    let section = ctx.config.report.clone();
    let baseline = section.as_ref().map(|s| s.baseline.clone()).unwrap_or_else(|| Ladder::Colocated.name().into());
    let inputs: Vec<PathBuf> = section.map(|s| s.inputs).unwrap_or_default().into_iter().chain(extra.iter().cloned()).collect();
    if inputs.is_empty() {
        return Err(CliError::Config("no report inputs: pass files or set [report] inputs".into()));
    }
    let mut reports = Vec::new();
    for p in &inputs {
        reports.extend(load_reports(p)?);
    }
    let mut csv = String::from("preset,executor,device_count,strategy,throughput,baseline_throughput,change_percent,mean_staleness,trainer_idle_fraction\n");
    let mut presets: Vec<&str> = Vec::new();
    for r in &reports {
        let base = reports.iter().find(|b| {
            b.strategy == baseline && b.device_count == r.device_count && b.preset == r.preset && b.executor == r.executor
        });
        let (bt, change) = match base {
            Some(b) => (b.throughput.to_string(), (100.0 * (r.throughput / b.throughput - 1.0)).to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{bt},{change},{},{}",
            r.preset,
            r.executor,
            r.device_count,
            r.strategy,
            r.throughput,
            r.mean_staleness(),
            r.trainer_idle_fraction
        );
        if !presets.contains(&r.preset.as_str()) {
            presets.push(&r.preset);
        }
    }
    ctx.write("report.csv", &csv)?;
    for p in presets {
        let subset: Vec<MetricsReport> = reports.iter().filter(|r| r.preset == p).cloned().collect();
        println!("{p}");
        print!("{}", ladder_table(&subset, &baseline));
    }
    Ok(())
}
