//! Fits the bundled presets and prints them as TOML.
//!
//! ```text
//! cargo run --release -p rlvla-core --example fit_presets -- ddp
//! cargo run --release -p rlvla-core --example fit_presets -- workload libero_pi05 [evals]
//! cargo run --release -p rlvla-core --example fit_presets -- packing
//! ```
//!
//! DDP presets are fitted with [`calibrate`] on the published epoch times.
//! Strategy presets are fitted by a pattern search in log-parameter space that
//! minimises the squared log error of simulated throughput against the
//! published strategy table, plus hinge penalties on the required orderings.

use rlvla_core::packing::{items, pack_ffd, throughput_proxy, PackingPreset};
use rlvla_core::sim::{run, RunConfig, Termination};
use rlvla_core::strategies::{Ladder, StrategyConfig};
use rlvla_core::workload::{
    calibrate, Affine, CalibratedModel, Coefficient, DdpPreset, EnvModel, HorizonDist, Observation, WorkloadPreset,
};

const HOUR: f64 = 3600.0;
const DEVICES: [usize; 3] = [8, 16, 32];

/// Published throughputs (samples/s) per ladder row at 8/16/32 devices.
fn targets(preset: &str) -> [[f64; 3]; 5] {
    match preset {
        "libero_pi05" => [
            [289.23, 547.55, 703.85],
            [162.75, 307.84, 457.23],
            [229.68, 441.49, 737.46],
            [369.56, 686.80, 1041.36],
            [383.40, 713.38, 1120.91],
        ],
        "libero_gr00t" => [
            [371.80, 680.46, 1125.62],
            [220.81, 409.60, 729.98],
            [243.57, 477.20, 951.33],
            [434.20, 816.48, 1620.39],
            [439.64, 816.48, 1592.40],
        ],
        // The rollout-async rows follow the published relative change against
        // colocated (-4.46%, +5.33%, +17.84%) rather than the absolute row.
        "maniskill_pi0" => [
            [132.56, 232.23, 370.26],
            [60.64, 150.59, 257.21],
            [126.65, 244.61, 436.32],
            [132.56 * 0.9554, 232.23 * 1.0533, 370.26 * 1.1784],
            [132.56 * 0.9554 * 1.02, 232.23 * 1.0533 * 1.02, 370.26 * 1.1784 * 1.02],
        ],
        other => panic!("no targets for {other}"),
    }
}

fn fit_ddp() {
    let points = [(32, 2.55 * HOUR), (64, 1.24 * HOUR), (128, 0.73 * HOUR)];
    let obs: Vec<_> = points
        .iter()
        .map(|&(dp, s)| Observation::DdpEpoch { dp, mbs: 128, epoch_seconds: s })
        .collect();
    let cal = calibrate("ddp_gr00t", &obs, Some(&[Coefficient::TrainAlpha, Coefficient::Contention]))
        .expect("ddp_gr00t calibration");
    report_ddp(&cal);
    // The unconstrained fit overshoots the 64->128 speedup; scan the
    // contention coefficient, refit the step constant for each value, and keep
    // the smallest worst-case error whose speedup lands near 1.69.
    let base = DdpPreset::builtin("ddp_gr00t").expect("ddp_gr00t");
    let mut best: Option<(f64, DdpPreset)> = None;
    for i in 0..4000 {
        let q = 1e-8 * 1.004f64.powi(i);
        let mut p = base.clone();
        p.cost.network.contention = q;
        p.cost.train = Affine::new(0.0, 0.0);
        // relative least squares for the step constant alone
        let unit: Vec<f64> = points.iter().map(|&(dp, _)| {
            let mut u = p.clone();
            u.cost.train.alpha = 1.0;
            u.epoch_time(dp, 128) - p.epoch_time(dp, 128)
        }).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for (&(dp, y), u) in points.iter().zip(&unit) {
            let r = (y - p.epoch_time(dp, 128)) / y;
            num += r * u / y;
            den += (u / y) * (u / y);
        }
        p.cost.train.alpha = (num / den).max(0.0);
        let worst = points
            .iter()
            .map(|&(dp, y)| ((p.epoch_time(dp, 128) - y) / y).abs())
            .fold(0.0, f64::max);
        let speedup = p.epoch_time(64, 128) / p.epoch_time(128, 128);
        if (speedup - 1.69).abs() > 0.03 {
            continue;
        }
        if best.as_ref().is_none_or(|(w, _)| worst < *w) {
            best = Some((worst, p));
        }
    }
    let (worst, p) = best.expect("feasible contention");
    eprintln!(
        "# ddp_gr00t (speedup-constrained): worst error {:.2}%, speedup {:.3}",
        100.0 * worst,
        p.epoch_time(64, 128) / p.epoch_time(128, 128)
    );
    for (dp, y) in points {
        eprintln!("#   dp={dp}: {:.3} h (published {:.2} h)", p.epoch_time(dp, 128) / HOUR, y / HOUR);
    }
    println!("{}", p.to_toml());

    let storage = [(256, 48.0 * 60.0), (512, 22.0 * 60.0)];
    let obs: Vec<_> = storage
        .iter()
        .map(|&(mbs, s)| Observation::DdpEpoch { dp: 128, mbs, epoch_seconds: s })
        .collect();
    let cal = calibrate("ddp_gr00t_storage", &obs, Some(&[Coefficient::TrainAlpha, Coefficient::TrainBeta]))
        .expect("ddp_gr00t_storage calibration");
    report_ddp(&cal);
}

fn report_ddp(cal: &rlvla_core::workload::Calibration) {
    eprintln!("# {}: fitted {:?}, pinned {:?}", cal.preset, cal.fitted, cal.pinned_at_zero);
    for r in &cal.residuals {
        eprintln!("#   {:?} -> {:.1} s ({:+.2}%)", r.observation, r.predicted, 100.0 * r.relative_error);
    }
    if let CalibratedModel::Ddp(p) = &cal.model {
        println!("{}", p.to_toml());
    }
}

/// A tunable scalar of a workload preset, searched in log space.
#[derive(Clone, Copy, Debug)]
enum Knob {
    InfAlpha,
    InfBeta,
    TrainAlpha,
    TrainBeta,
    EnvA,
    EnvB,
    SyncOverhead,
    WeightLoad,
    RingBytes,
    Contention,
    TMax,
}

const KNOBS: [Knob; 11] = [
    Knob::InfAlpha,
    Knob::InfBeta,
    Knob::TrainAlpha,
    Knob::TrainBeta,
    Knob::EnvA,
    Knob::EnvB,
    Knob::SyncOverhead,
    Knob::WeightLoad,
    Knob::RingBytes,
    Knob::Contention,
    Knob::TMax,
];

fn get(p: &WorkloadPreset, k: Knob) -> f64 {
    match k {
        Knob::InfAlpha => p.cost.inference.alpha,
        Knob::InfBeta => p.cost.inference.beta,
        Knob::TrainAlpha => p.cost.train.alpha,
        Knob::TrainBeta => p.cost.train.beta,
        Knob::EnvA => match p.cost.env {
            EnvModel::CpuPerEnv { step_cost, .. } => step_cost,
            EnvModel::GpuBatched { alpha, .. } => alpha,
        },
        Knob::EnvB => match p.cost.env {
            EnvModel::CpuPerEnv { jitter, .. } => jitter,
            EnvModel::GpuBatched { beta, .. } => beta,
        },
        Knob::SyncOverhead => p.cost.sync_overhead,
        Knob::WeightLoad => p.cost.weight_load,
        Knob::RingBytes => p.network.param_bytes,
        Knob::Contention => p.network.contention,
        Knob::TMax => p.rollout_async.t_max,
    }
}

fn set(p: &mut WorkloadPreset, k: Knob, v: f64) {
    match k {
        Knob::InfAlpha => p.cost.inference.alpha = v,
        Knob::InfBeta => p.cost.inference.beta = v,
        Knob::TrainAlpha => p.cost.train.alpha = v,
        Knob::TrainBeta => p.cost.train.beta = v,
        Knob::EnvA => match &mut p.cost.env {
            EnvModel::CpuPerEnv { step_cost, .. } => *step_cost = v,
            EnvModel::GpuBatched { alpha, .. } => *alpha = v,
        },
        Knob::EnvB => match &mut p.cost.env {
            EnvModel::CpuPerEnv { jitter, .. } => *jitter = v,
            EnvModel::GpuBatched { beta, .. } => *beta = v,
        },
        Knob::SyncOverhead => p.cost.sync_overhead = v,
        Knob::WeightLoad => p.cost.weight_load = v,
        Knob::RingBytes => p.network.param_bytes = v,
        Knob::Contention => p.network.contention = v,
        Knob::TMax => p.rollout_async.t_max = v,
    }
}

fn ladder(p: &WorkloadPreset) -> Option<[[f64; 3]; 5]> {
    let mut out = [[0.0; 3]; 5];
    for (i, step) in Ladder::ALL.into_iter().enumerate() {
        for (j, &n) in DEVICES.iter().enumerate() {
            let mut cfg = RunConfig::new(p.clone(), StrategyConfig::ladder(step, p), n, 1);
            cfg.termination = Termination::Updates(8);
            out[i][j] = run(&cfg).ok()?.throughput;
        }
    }
    Some(out)
}

fn hinge(x: f64) -> f64 {
    if x > 0.0 {
        100.0 * x * x
    } else {
        0.0
    }
}

fn loss(name: &str, sim: &[[f64; 3]; 5]) -> f64 {
    let t = targets(name);
    let mut l = 0.0;
    for i in 0..5 {
        for j in 0..3 {
            l += (sim[i][j] / t[i][j]).ln().powi(2);
        }
    }
    let [col, dis, ta, ra, st] = *sim;
    let m = 0.05;
    for j in 0..3 {
        if name == "maniskill_pi0" {
            continue;
        }
        l += hinge((dis[j] - ta[j]) / ta[j] + m);
        l += hinge((dis[j] - col[j]) / col[j] + m);
        l += hinge((col[j] - ra[j]) / ra[j] + m);
        l += hinge(0.97 + m / 2.0 - st[j] / ra[j]);
    }
    if name == "maniskill_pi0" {
        let gap: Vec<f64> = (0..3).map(|j| ra[j] / col[j] - 1.0).collect();
        l += hinge(gap[0] + m);
        l += hinge(gap[0] - gap[1] + m);
        l += hinge(gap[1] - gap[2] + m);
        l += hinge(-gap[2] + m);
    } else {
        l += hinge(0.30 + m - (st[2] / col[2] - 1.0));
    }
    l
}

fn print_table(name: &str, sim: &[[f64; 3]; 5]) {
    let t = targets(name);
    for (i, step) in Ladder::ALL.iter().enumerate() {
        let cells: String = (0..3)
            .map(|j| format!("{:>9.1} ({:>7.1})", sim[i][j], t[i][j]))
            .collect();
        eprintln!("#   {:<14}{cells}", step.name());
    }
}

fn fit_workload(name: &str, evals: usize) {
    let mut p = WorkloadPreset::builtin(name).expect("preset");
    let mut best = ladder(&p).map(|s| (loss(name, &s), s)).expect("initial run");
    let mut step = 0.5f64;
    let mut n = 0;
    while n < evals && step > 0.01 {
        let mut improved = false;
        for k in KNOBS {
            let v0 = get(&p, k);
            if v0 <= 0.0 {
                continue;
            }
            for dir in [1.0, -1.0] {
                let mut q = p.clone();
                set(&mut q, k, v0 * (dir * step).exp());
                if q.validate().is_err() {
                    continue;
                }
                n += 1;
                if let Some(s) = ladder(&q) {
                    let l = loss(name, &s);
                    if l < best.0 {
                        best = (l, s);
                        p = q;
                        improved = true;
                        eprintln!("# eval {n}: loss {l:.4} ({k:?} x{:.3})", (dir * step).exp());
                        break;
                    }
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    eprintln!("# {name}: final loss {:.4}", best.0);
    print_table(name, &best.1);
    if let HorizonDist::TruncatedGeometric { p: q, max } = p.episode.horizon {
        eprintln!("# horizon p={q} max={max}, mean samples {:.2}", p.episode.mean_samples());
    }
    println!("{}", p.to_toml());
}

/// Bisect the log-normal text mean so the packing throughput proxy lands on 1.88.
fn fit_packing() {
    let mut p = PackingPreset::builtin("qwen25vl_sft").expect("packing preset");
    let proxy = |p: &PackingPreset| {
        let bins = pack_ffd(&items(&p.generate()), p.capacity).expect("pack");
        throughput_proxy(&bins, p.pad_to, p.dim)
    };
    let (mut lo, mut hi) = (3.0f64, 8.5f64);
    for _ in 0..60 {
        p.text.mu = 0.5 * (lo + hi);
        // longer text means less padding and a smaller gain
        if proxy(&p) > 1.88 {
            lo = p.text.mu;
        } else {
            hi = p.text.mu;
        }
    }
    p.text.mu = (p.text.mu * 1e4).round() / 1e4;
    eprintln!("# mu {} -> proxy {:.4}", p.text.mu, proxy(&p));
    println!("{}", toml::to_string(&p).expect("toml"));
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("ddp") => fit_ddp(),
        Some("workload") => {
            let name = args.get(1).expect("preset name");
            let evals = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(400);
            fit_workload(name, evals);
        }
        Some("packing") => fit_packing(),
        Some("show") => {
            let name = args.get(1).expect("preset name");
            let p = WorkloadPreset::builtin(name).expect("preset");
            let s = ladder(&p).expect("runs");
            eprintln!("# {name}: loss {:.4}", loss(name, &s));
            print_table(name, &s);
        }
        _ => eprintln!("usage: fit_presets ddp | workload <name> [evals] | show <name>"),
    }
}
