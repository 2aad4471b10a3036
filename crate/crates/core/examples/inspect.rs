//! Print the metrics report for one run, optionally also under the live executor.
//!
//! `cargo run --release -p rlvla-core --example inspect -- libero_pi05 rollout_async 8 [live] [updates]`

use std::time::Instant;

use rlvla_core::sim::{run, run_live, LiveOptions, RunConfig, Termination};
use rlvla_core::strategies::{Ladder, StrategyConfig};
use rlvla_core::workload::WorkloadPreset;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let preset = WorkloadPreset::resolve(&args[0]).expect("preset");
    let step = Ladder::parse(&args[1]).expect("strategy");
    let n: usize = args[2].parse().expect("devices");
    let mut cfg = RunConfig::new(preset.clone(), StrategyConfig::ladder(step, &preset), n, 1);
    if let Some(u) = args.get(4) {
        cfg.termination = Termination::Updates(u.parse().expect("updates"));
    }
    let mut r = run(&cfg).expect("run");
    r.queue_depth.clear();
    if args.get(3).map(String::as_str) == Some("live") {
        let t = Instant::now();
        let (live, _) = run_live(&cfg, &LiveOptions::default()).expect("live run");
        println!(
            "virtual {:.1} live {:.1} ({:+.1}%), sim {:.1}s, wall {:.1}s",
            r.throughput,
            live.throughput,
            100.0 * (live.throughput / r.throughput - 1.0),
            r.sim_time,
            t.elapsed().as_secs_f64()
        );
    } else {
        println!("{}", r.to_json());
    }
}
