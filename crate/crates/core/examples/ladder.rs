//! Print the strategy ladder for one preset across device counts.
//!
//! `cargo run --release -p rlvla-core --example ladder -- libero_pi05 8 16 32`

use std::time::Instant;

use rlvla_core::sim::{run, RunConfig};
use rlvla_core::strategies::{Ladder, StrategyConfig};
use rlvla_core::workload::WorkloadPreset;

fn main() {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "libero_pi05".into());
    let preset = WorkloadPreset::resolve(&name).expect("preset");
    let devices: Vec<usize> = args.map(|a| a.parse().expect("device count")).collect();
    let devices = if devices.is_empty() { vec![8, 16, 32] } else { devices };
    println!("{:<14}{}", "strategy", devices.iter().map(|d| format!("{d:>12}")).collect::<String>());
    let mut col = vec![0.0; devices.len()];
    for step in Ladder::ALL {
        let mut line = format!("{:<14}", step.name());
        for (i, &n) in devices.iter().enumerate() {
            let cfg = RunConfig::new(preset.clone(), StrategyConfig::ladder(step, &preset), n, 1);
            let t = Instant::now();
            let r = run(&cfg).expect("run");
            if step == Ladder::Colocated {
                col[i] = r.throughput;
            }
            line.push_str(&format!(
                "{:>8.1}{:>+5.0}%",
                r.throughput,
                100.0 * (r.throughput / col[i] - 1.0)
            ));
            eprint!("[{n}:{:.2}s st={:.2}] ", t.elapsed().as_secs_f64(), r.mean_staleness());
        }
        eprintln!();
        println!("{line}");
    }
}
