use std::fs;
use std::path::Path;
use std::process::Command;

use krflab::{presets, ExperimentConfig, FAILED_MARKER};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_krflab"))
}

const SMALL: &str = r#"{
    "name": "small",
    "geometry": {"volume": 2.0, "grid": {"s_min": -10.0, "s_max": 10.0, "n_points": 161}},
    "initial_data": {"kind": "bump", "amplitude": 0.2, "width": 1.0},
    "flow": {"dt": 0.01, "t_end": 0.2, "times": [0.1, 0.2]}
}"#;

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn list_presets_prints_the_registry() {
    let out = bin().arg("list-presets").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 8);
    for (name, _) in presets::list_presets() {
        assert!(text.contains(name), "{name}");
    }
}

#[test]
fn empty_checks_give_trajectories_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("out");
    let status = bin().arg("run").arg(&cfg).arg("--out").arg(&out).output().unwrap().status;
    assert!(status.success());
    assert!(fs::read_dir(out.join("reports")).unwrap().next().is_none());
    let m = manifest(&out);
    assert_eq!(m["status"], "ok");
    let tables = m["tables"].as_object().unwrap();
    assert_eq!(tables.keys().collect::<Vec<_>>(), ["tables/trajectory.csv"]);
    let csv = fs::read_to_string(out.join("tables/trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,s,u,log_density,trace_ratio\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 161);
    assert!(!out.join(FAILED_MARKER).exists());
}

#[test]
fn reruns_are_bit_identical() {
    let mut cfg = presets::find("comparison-sweep").unwrap().config();
    cfg.geometry.grid.n_points = 121;
    cfg.flow = serde_json::from_str(r#"{"dt": 0.01, "t_end": 0.2, "times": [0.1, 0.2]}"#).unwrap();
    cfg.output.trajectories = true;
    let dir = tempfile::tempdir().unwrap();
    let a = krflab::run(&cfg, &dir.path().join("a"), Path::new("."), 1).unwrap();
    let b = krflab::run(&cfg, &dir.path().join("b"), Path::new("."), 1).unwrap();
    assert!(!a.manifest.tables.is_empty());
    assert_eq!(a.manifest.tables, b.manifest.tables);
    assert_eq!(a.manifest.config_hash, b.manifest.config_hash);
    for entry in &a.manifest.reports {
        let x = fs::read(dir.path().join("a").join(&entry.file)).unwrap();
        let y = fs::read(dir.path().join("b").join(&entry.file)).unwrap();
        assert_eq!(x, y, "{}", entry.file);
    }
    cfg.seed += 1;
    let c = krflab::run(&cfg, &dir.path().join("c"), Path::new("."), 1).unwrap();
    assert_ne!(a.manifest.tables["tables/trajectory_00.csv"], c.manifest.tables["tables/trajectory_00.csv"]);
}

#[test]
fn module_errors_name_the_stage_and_leave_a_marker() {
    let dir = tempfile::tempdir().unwrap();
    // u'' = -10 at s = 0 while omega'' = 1/2: not omega-psh.
    let rows: String = (0..=200)
        .map(|k| {
            let s = -10.0 + 0.1 * k as f64;
            format!("{s},{}\n", 5.0 * (-s * s).exp())
        })
        .collect();
    fs::write(dir.path().join("bad.csv"), format!("s,value\n{rows}")).unwrap();
    let text = SMALL.replace(
        r#"{"kind": "bump", "amplitude": 0.2, "width": 1.0}"#,
        r#"{"kind": "profile_file", "path": "bad.csv"}"#,
    );
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let res = bin().arg("run").arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8(res.stderr).unwrap();
    assert!(err.contains("stage `trajectories` failed"), "{err}");
    assert!(out.join(FAILED_MARKER).exists());
    assert_eq!(manifest(&out)["status"], "error");
}

#[test]
fn failing_check_sets_the_exit_code() {
    let mut cfg = presets::find("capacity-decay").unwrap().config();
    cfg.checks.truncate(1);
    let text = cfg.to_json().replace("1e-6", "1e-30").replace("0.000001", "1e-30");
    let parsed = ExperimentConfig::from_json(&text).unwrap();
    assert_ne!(parsed, cfg, "tolerance was rewritten");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("strict.json");
    fs::write(&path, text).unwrap();
    let out = dir.path().join("out");
    let status = bin().arg("run").arg(&path).arg("--out").arg(&out).output().unwrap().status;
    assert_eq!(status.code(), Some(1));
    assert_eq!(manifest(&out)["status"], "checks_failed");
    assert!(!out.join(FAILED_MARKER).exists());
}

#[test]
fn preset_flags_override_seed_and_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cap");
    let status = bin()
        .args(["preset", "capacity-decay", "--seed", "3", "--grid-refine", "2", "--out"])
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let m = manifest(&out);
    assert_eq!(m["seed"], 3);
    assert_eq!(m["grid_refine"], 2);
    assert_eq!(m["config"]["geometry"]["grid"]["n_points"], 321);
    assert!(out.join("tables/summary.csv").exists());
    let unknown = bin().args(["preset", "nope"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn written_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(SMALL).unwrap();
    krflab::run(&cfg, dir.path(), Path::new("."), 1).unwrap();
    let echoed = ExperimentConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(echoed, cfg);
}
