//! End-to-end tests driving the binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_isothresh"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn fit_reproduces_pooled_levels() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("d.csv"), "x,y\n0.1,1\n0.2,3\n0.3,2\n").unwrap();
    let out = run(&["fit", "--input", "d.csv", "--domain", "0,1"], dir.path());
    let v = stdout_json(&out);
    assert_eq!(v["result"]["levels"], serde_json::json!([1.0, 2.5, 2.5]));
    // Config echo present.
    assert_eq!(v["config"]["domain"]["hi"], 1.0);
}

#[test]
fn fit_decreasing_negates_levels() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("d.csv"), "0.1,3\n0.2,1\n0.3,2\n").unwrap();
    let out = run(&["fit", "--input", "d.csv", "--domain", "0,1", "--decreasing"], dir.path());
    let v = stdout_json(&out);
    let levels: Vec<f64> =
        v["result"]["levels"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    for w in levels.windows(2) {
        assert!(w[0] >= w[1]);
    }
}

#[test]
fn rates_final_rate_matches_recursion() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["rates", "--k", "4", "--gamma1", "0.3333", "--eta", "0"], dir.path());
    let v = stdout_json(&out);
    let rate = v["result"]["final_rate"].as_f64().unwrap();
    assert!((rate - 0.4938).abs() < 1e-4);
}

#[test]
fn ci_runs_lr_family_on_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("x,y\n");
    for i in 0..60 {
        let x = (i as f64 + 0.5) / 60.0;
        // Deterministic wiggle stands in for noise.
        let y = x + 0.05 * (13.0 * x).sin();
        csv.push_str(&format!("{x},{y}\n"));
    }
    std::fs::write(dir.path().join("d.csv"), csv).unwrap();
    let out = run(
        &["ci", "--input", "d.csv", "--domain", "0,1", "--theta0", "0.5", "--family", "lr",
          "--sigma2", "0.01", "--grid-size", "201"],
        dir.path(),
    );
    let v = stdout_json(&out);
    let (lo, hi) = (
        v["result"]["lower"].as_f64().unwrap(),
        v["result"]["upper"].as_f64().unwrap(),
    );
    assert!(lo <= 0.5 && 0.5 <= hi, "interval [{lo}, {hi}] should cover the root");
    assert_eq!(v["result"]["family"], "lr");
}

#[test]
fn plan_emits_interval_with_back_solved_constant() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::new();
    for i in 0..125 {
        let x = (i as f64 + 0.5) / 125.0;
        csv.push_str(&format!("{x},{x}\n"));
    }
    std::fs::write(dir.path().join("s1.csv"), csv).unwrap();
    let out = run(
        &["plan", "--input", "s1.csv", "--domain", "0,1", "--theta0", "0.5", "--n2", "375",
          "--family", "wald", "--sigma2", "0.01", "--deriv", "1.0", "--g", "1.0"],
        dir.path(),
    );
    let v = stdout_json(&out);
    let c1 = v["result"]["c1"].as_f64().unwrap();
    let (l1, u1) = (
        v["result"]["interval"][0].as_f64().unwrap(),
        v["result"]["interval"][1].as_f64().unwrap(),
    );
    // Half-width must equal c1 * n1^(-1/3) before clipping.
    let half = c1 * 125f64.powf(-1.0 / 3.0);
    assert!(((u1 - l1) / 2.0 - half).abs() < 1e-9 || l1 == 0.0 || u1 == 1.0);
}

#[test]
fn run2_simulated_writes_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["run2", "--function", "quadratic", "--d0", "0.5", "--sigma", "0.1", "--n", "120",
          "--grid-size", "201", "--stage1-grid-size", "101", "--seed", "3",
          "--output", "out.json"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out.json")).unwrap())
            .unwrap();
    assert_eq!(v["config"]["theta0"], 0.25);
    assert!(v["result"]["final_interval"]["lower"].is_number());
    let n1 = v["result"]["plan"]["n1"].as_u64().unwrap();
    let n2 = v["result"]["plan"]["n2"].as_u64().unwrap();
    assert_eq!(n1 + n2, 120);
}

#[test]
fn tabulate_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.json", "b.json"] {
        let out = run(
            &["tabulate", "--dist", "z", "--paths", "100000", "--half-width", "2", "--step",
              "0.01", "--seed", "9", "--output", name],
            dir.path(),
        );
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    let b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b);
    // The cache re-ingests as a table.
    let table = isothresh::limits::LimitQuantiles::from_json_str(
        &String::from_utf8(a).unwrap(),
    )
    .unwrap();
    assert!(table.quantile(0.5).unwrap().abs() < 0.05);
}

#[test]
fn tabulate_directory_output_uses_keyed_cache_name() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("cache")).unwrap();
    let out = run(
        &["tabulate", "--dist", "z", "--paths", "100000", "--half-width", "2", "--step", "0.01",
          "--seed", "1", "--output", "cache"],
        dir.path(),
    );
    assert!(out.status.success());
    let printed = String::from_utf8_lossy(&out.stdout);
    let path = printed.trim();
    assert!(path.starts_with("cache/chernoff_") && path.ends_with(".json"), "got {path}");
    assert!(dir.path().join(path).exists());
}

#[test]
fn exit_codes_distinguish_validation_and_runtime() {
    let dir = tempfile::tempdir().unwrap();
    // Missing input file: validation, exit 1.
    let out = run(&["fit", "--input", "nope.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    // Unknown flag: validation, exit 1.
    let out = run(&["fit", "--garbage"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    // Malformed CSV row reported with its line number.
    std::fs::write(dir.path().join("bad.csv"), "x,y\n0.1,1\nbroken-row\n").unwrap();
    let out = run(&["fit", "--input", "bad.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    // Flat data cannot support a Wald interval: runtime, exit 2.
    let mut csv = String::new();
    for i in 0..40 {
        csv.push_str(&format!("{},1.0\n", i as f64 / 40.0));
    }
    std::fs::write(dir.path().join("flat.csv"), csv).unwrap();
    let out = run(
        &["ci", "--input", "flat.csv", "--domain", "0,1", "--theta0", "0.5", "--family", "wald"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_coverage_config_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "kind": "coverage",
        "functions": ["quadratic"],
        "d0s": [0.5],
        "sigmas": [0.1],
        "ns": [100],
        "procedures": ["one-stage-lr"],
        "replicates": 4,
        "seed": 42,
        "domain": {"lo": 0.0, "hi": 1.0},
        "proc": {
            "alpha": 0.05, "beta": 0.01, "p_two_stage": 0.25, "p_local_linear": 0.7,
            "pooling_threshold": 200, "grid_size": 201, "stage1_grid_size": 101,
            "conservative_stage1": true, "known_nuisance": false
        }
    });
    std::fs::write(dir.path().join("cfg.json"), config.to_string()).unwrap();
    let out = run(
        &["simulate", "--config", "cfg.json", "--output", "report.json", "--csv", "report.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["cells"][0]["procedure"], "one-stage-lr");
    assert_eq!(report["config"]["replicates"], 4);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn emulate_reports_table_shape() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::new();
    for i in 0..300 {
        let x = (i as f64 + 0.5) / 300.0;
        // Deterministic noise-like wiggle so the stage-one region stays wide
        // enough to support stage-two sampling.
        let y = x * x + 0.1 * (233.7 * i as f64 + 1.3).sin();
        csv.push_str(&format!("{x},{y}\n"));
    }
    std::fs::write(dir.path().join("pop.csv"), csv).unwrap();
    let out = run(
        &["emulate", "--population", "pop.csv", "--theta0", "0.25", "--budget", "80", "--p",
          "0.5", "--procedures", "one-stage-lr,two-stage-lr", "--grid-size", "201",
          "--stage1-grid-size", "101", "--seed", "5", "--output", "emu.json"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("emu.json")).unwrap())
            .unwrap();
    let rows = v["result"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert!(row["estimate"].is_number(), "row failed: {row}");
        assert!(row["bias"].is_number());
        assert!(row["length"].is_number());
        assert!(row["covered"].is_boolean());
    }
    // Two-stage allocation echoed as 40/40.
    assert_eq!(rows[1]["n1"], 40);
    assert_eq!(rows[1]["n2"], 40);
}
