use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rlvla_core::sim::MetricsReport;
use rlvla_core::workload::DdpPreset;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rlvla"))
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn rlvla(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn eight_device_ladder_gives_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bundled("ladder_8_devices.cfg");
    let o = rlvla(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let reports: Vec<MetricsReport> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("simulate.json")).unwrap()).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.strategy.as_str()).collect();
    assert_eq!(names, ["colocated", "disaggregated", "train_async", "rollout_async", "streamer"]);
    assert!(reports.iter().all(|r| r.device_count == 8 && r.throughput > 0.0));
    let csv = std::fs::read_to_string(dir.path().join("simulate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 6);
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "bad.cfg",
        "[run]\npreset = \"libero_pi05\"\ndevices = [8]\n\n[run.batcher]\nb_maxx = 4\n",
    );
    let o = rlvla(&["simulate", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("b_maxx") && err.contains("line 6"), "{err}");
    assert!(!dir.path().join("simulate.json").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rlvla(&["simulate"]).status.code(), Some(2));
    assert_eq!(rlvla(&["frobnicate"]).status.code(), Some(2));
    let cases = [
        "[run]\npreset = \"no_such_preset\"\ndevices = [8]\n",
        "[run]\npreset = \"libero_pi05\"\ndevices = [8]\nstrategies = [\"fastest\"]\n",
        "[run]\npreset = \"libero_pi05\"\ndevices = [8]\nupdates = 3\nduration = 10.0\n",
        "[run]\npreset = \"libero_pi05\"\ndevices = [1]\nstrategies = [\"disaggregated\"]\n",
        "[sweep]\npreset = \"libero_pi05\"\ndevices = [8]\n",
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = write_cfg(dir.path(), &format!("c{i}.cfg"), text);
        let o = rlvla(&["simulate", "--config", &cfg, "--out", s(dir.path())]);
        assert_eq!(o.status.code(), Some(2), "case {i}: {}", stderr(&o));
    }
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "s.cfg",
        "[run]\npreset = \"libero_gr00t\"\ndevices = [8]\nstrategies = [\"colocated\", \"streamer\"]\nupdates = 5\n",
    );
    let mut outs = Vec::new();
    for k in ["a", "b"] {
        let out = dir.path().join(k);
        let log = out.join("events.ndjson");
        let o = rlvla(&["simulate", "--config", &cfg, "--seed", "9", "--out", s(&out), "--event-log", s(&log)]);
        assert!(o.status.success(), "{}", stderr(&o));
        outs.push(out);
    }
    for f in ["simulate.json", "simulate.csv", "events.colocated.8.ndjson", "events.streamer.8.ndjson"] {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        let b = std::fs::read(outs[1].join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f} differs");
    }
    // a different seed changes the episode draws
    let out = dir.path().join("c");
    assert!(rlvla(&["simulate", "--config", &cfg, "--seed", "10", "--out", s(&out)]).status.success());
    assert_ne!(std::fs::read(out.join("simulate.json")).unwrap(), std::fs::read(outs[0].join("simulate.json")).unwrap());
}

#[test]
fn sweep_records_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "sw.cfg",
        "[sweep]\npreset = \"libero_pi05\"\ndevices = [1, 8, 16]\nstrategies = [\"train_async\"]\nupdates = 5\n",
    );
    let o = rlvla(&["sweep", "--config", &cfg, "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "device_count,strategy,preset,throughput,scaling_efficiency,error");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,train_async") && lines[1].contains("at least 2 devices"));
    // the first successful point is the efficiency base
    let eff = |l: &str| l.split(',').nth(4).unwrap().parse::<f64>().unwrap();
    assert_eq!(eff(lines[2]), 1.0);
    assert!(eff(lines[3]) > 0.5 && eff(lines[3]) <= 1.05);
}

#[test]
fn pack_bundled_preset() {
    let dir = tempfile::tempdir().unwrap();
    let o = rlvla(&["pack", "--config", s(&bundled("pack_qwen25vl.cfg")), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("pack_stats.json")).unwrap()).unwrap();
    let proxy = stats["throughput_proxy"].as_f64().unwrap();
    assert!((proxy - 1.88).abs() < 0.1, "{proxy}");
    let manifest = std::fs::read_to_string(dir.path().join("pack_manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count() - 1, stats["stats"]["samples"].as_u64().unwrap() as usize);
}

#[test]
fn pack_oversize_names_sample() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.csv"), "id,text,image\nshort,10,0\nhuge_one,5000,256\n").unwrap();
    let cfg = write_cfg(dir.path(), "p.cfg", "[packing]\ncorpus = \"c.csv\"\ncapacity = 4096\n");
    let o = rlvla(&["pack", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("huge_one"), "{}", stderr(&o));

    let cfg = write_cfg(dir.path(), "p2.cfg", "[packing]\ncorpus = \"c.csv\"\ncapacity = 8192\nalgorithm = \"greedy\"\n");
    let o = rlvla(&["pack", "--config", &cfg, "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(dir.path().join("pack_manifest.csv")).unwrap();
    assert_eq!(manifest, "bin,position,id,length,offset\n0,0,short,10,0\n0,1,huge_one,5256,10\n");
}

#[test]
fn quantbench_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = rlvla(&["quantbench", "--config", s(&bundled("quantbench.cfg")), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("quantbench.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    let get = |f: &str, g: &str| rows.iter().find(|r| r["fixture"] == f && r["granularity"] == g).unwrap();
    assert_eq!(get("linear_uniform", "per_block:128x128")["groups"], 16);
    assert_eq!(get("linear_uniform", "per_channel:0")["groups"], 512);
    // wide channel spread: one shared scale pushes the small rows into subnormals
    let rmse = |g: &str| get("linear_outliers", g)["row_rel_rmse"].as_f64().unwrap();
    assert!(rmse("per_tensor") > 1.5 * rmse("per_channel:0"));
    let comp: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("compression.json")).unwrap()).unwrap();
    assert!((comp["reduction_percent"].as_f64().unwrap() - 36.6).abs() < 1.0);
}

#[test]
fn quantbench_rejects_non_finite() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.txt"), "2 2\n1 2 nan 4\n").unwrap();
    let cfg = write_cfg(dir.path(), "q.cfg", "[quantization]\nfixtures = [\"t.txt\"]\n");
    let o = rlvla(&["quantbench", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    let cfg = write_cfg(dir.path(), "q2.cfg", "[quantization]\nfixtures = [\"t.txt\"]\ngranularities = [\"per_row\"]\n");
    assert_eq!(rlvla(&["quantbench", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn calibrate_writes_preset() {
    let dir = tempfile::tempdir().unwrap();
    let o = rlvla(&["calibrate", "--config", s(&bundled("calibrate_ddp_gr00t.cfg")), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("ddp_gr00t.calibrated.toml")).unwrap();
    let p = DdpPreset::parse(&text, "calibrated").unwrap();
    let err = |dp, secs: f64| (p.epoch_time(dp, 128) / secs - 1.0).abs();
    assert!(err(32, 9180.0) < 0.05 && err(64, 4464.0) < 0.05 && err(128, 2628.0) < 0.05);

    let cfg = write_cfg(
        dir.path(),
        "under.cfg",
        "[calibration]\npreset = \"libero_pi05\"\n\n[[calibration.observations]]\nkind = \"inference\"\nbatch = 4.0\nlatency = 0.2\n",
    );
    let o = rlvla(&["calibrate", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("inference_beta") || stderr(&o).contains("inference_alpha"), "{}", stderr(&o));
}

#[test]
fn report_against_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "r.cfg",
        "[run]\npreset = \"libero_pi05\"\ndevices = [8]\nstrategies = [\"colocated\", \"rollout_async\"]\nupdates = 5\n",
    );
    let run = dir.path().join("run");
    assert!(rlvla(&["simulate", "--config", &cfg, "--out", s(&run)]).status.success());
    let out = dir.path().join("rep");
    let o = rlvla(&["report", s(&run.join("simulate.json")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let row = csv.lines().find(|l| l.contains(",rollout_async,")).unwrap();
    let change: f64 = row.split(',').nth(6).unwrap().parse().unwrap();
    assert!(change > 0.0, "{row}");
    assert_eq!(rlvla(&["report", "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn live_executor_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "live.cfg",
        "executor = \"live\"\n\n[run]\npreset = \"libero_pi05\"\ndevices = [8]\nstrategies = [\"rollout_async\"]\nupdates = 4\nwarmup_updates = 1\n\n[live]\ntime_scale = 0.02\n",
    );
    let o = rlvla(&["simulate", "--config", &cfg, "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let reports: Vec<MetricsReport> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("simulate.json")).unwrap()).unwrap();
    assert_eq!(reports[0].executor, "live");
    assert!(reports[0].updates >= 4);
}
