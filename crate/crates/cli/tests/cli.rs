use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "n_vehicles": 12,
  "horizon_s": 120,
  "initial_spacing_m": 36,
  "signal": {"cycle_s": 60, "red_s": 30, "go_speed_kmh": 60, "cycles": 2},
  "distribution": {
    "v_f_kmh": {"lo": 40, "hi": 80, "alpha": 2, "beta": 2},
    "d_m": {"lo": 5.88, "hi": 9.09, "alpha": 2, "beta": 2},
    "c_vph": {"lo": 1100, "hi": 5100, "alpha": 2, "beta": 2}
  },
  "sample_size": 500,
  "seed": 3,
  "penetration": 0.5
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lagtraffic"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn simulate_writes_one_path() {
    let dir = setup();
    let out = run(dir.path(), &["simulate", "small.json", "--out", "a"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("a/trajectories.csv"));
    let mut ids: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    ids.sort();
    ids.dedup();
    // leader plus 12 followers
    assert_eq!(ids.len(), 13);
    let t_max = rows.iter().map(|r| r[1].parse::<f64>().unwrap()).fold(0.0, f64::max);
    assert!(t_max >= 120.0);
    assert!(dir.path().join("a/trajectories.json").exists());
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/simulate.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn ensemble_writes_members_and_average() {
    let dir = setup();
    let out = run(dir.path(), &["simulate", "small.json", "--ensemble", "3", "--out", "e"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["member_000.csv", "member_001.csv", "member_002.csv", "average.csv"] {
        assert!(dir.path().join("e").join(f).exists(), "{f}");
    }
    assert!(!dir.path().join("e/member_003.csv").exists());
}

#[test]
fn same_seed_same_bytes() {
    let dir = setup();
    for d in ["x", "y"] {
        let out = run(dir.path(), &["simulate", "small.json", "--seed", "42", "--out", d]);
        assert!(out.status.success());
    }
    let x = std::fs::read(dir.path().join("x/trajectories.csv")).unwrap();
    let y = std::fs::read(dir.path().join("y/trajectories.csv")).unwrap();
    assert_eq!(x, y);
    let run3 = run(dir.path(), &["simulate", "small.json", "--seed", "43", "--out", "z"]);
    assert!(run3.status.success());
    assert_ne!(x, std::fs::read(dir.path().join("z/trajectories.csv")).unwrap());
}

#[test]
fn bad_config_exits_2() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.json"), r#"{"n_vehicles": 0}"#).unwrap();
    let out = run(dir.path(), &["simulate", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = run(dir.path(), &["simulate", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), &["--jobs", "0", "simulate", "small.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn estimate_reports_metrics() {
    let dir = setup();
    let out = run(
        dir.path(),
        &["estimate", "small.json", "--penetration", "0,0.5", "--dump-cov", "60", "--json", "--out", "m"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!(r["rmse_m"].as_f64().unwrap() > 0.0);
        assert!(r["mape_pct"].as_f64().unwrap() > 0.0);
        assert_eq!(r["hygiene"]["clean"], true);
    }
    assert_eq!(rows[0]["probes"], 0);
    assert_eq!(rows[1]["probes"], 6);
    for f in ["metrics.json", "estimate_p0.5.csv", "cov_p0.5_t60.csv", "estimate.manifest.json"] {
        assert!(dir.path().join("m").join(f).exists(), "{f}");
    }
}

#[test]
fn estimate_accepts_truth_file() {
    let dir = setup();
    assert!(run(dir.path(), &["simulate", "small.json", "--out", "t"]).status.success());
    let out = run(
        dir.path(),
        &["estimate", "small.json", "--truth", "t/trajectories.csv", "--penetration", "0.25", "--json", "--out", "m"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["rows"][0]["probes"], 3);
}

#[test]
fn verify_point_mass_passes() {
    let dir = setup();
    std::fs::write(
        dir.path().join("pm.json"),
        r#"{"v_f": {"lo": 16, "hi": 16, "alpha": 2, "beta": 2},
            "d": {"lo": 7, "hi": 7, "alpha": 2, "beta": 2},
            "c": {"lo": 0.8, "hi": 0.8, "alpha": 2, "beta": 2},
            "units": "SI"}"#,
    )
    .unwrap();
    let out = run(
        dir.path(),
        &["verify", "--law", "pm.json", "--seeds", "2", "--draws", "1000", "--replications", "50", "--out", "v"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("v/verify.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 3);
}

#[test]
fn verify_failure_exits_4() {
    let dir = setup();
    let out = run(dir.path(), &["verify", "--suite", "deviation", "--replications", "50", "--out", "v"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("deviation"));
}

#[test]
fn fields_schema() {
    let dir = setup();
    assert!(run(dir.path(), &["simulate", "small.json", "--out", "t"]).status.success());
    let out = run(
        dir.path(),
        &["fields", "t/trajectories.csv", "--dx", "100", "--dt", "30", "--out", "f"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("f/fields.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t_s,x_m,density_vpkm,speed_kmh");
    let rows = csv_rows(&dir.path().join("f/fields.csv"));
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!(r.len(), 4);
        if !r[2].is_empty() {
            assert!(r[2].parse::<f64>().unwrap() >= 0.0);
        }
    }
}
