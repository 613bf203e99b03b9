use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gxe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gxe")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(dir: &Path, scenario: &str) {
    let out = dir.join("sim");
    let o = gxe(&[
        "simulate", "--scenario", scenario, "--n", "80", "--p", "30", "--test-n", "40", "--seed", "11",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let o = gxe(&["--version"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("gxe "));
    let o = gxe(&["tune", "--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("--lambda1-min-ratio"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&gxe(&["frobnicate"])), 1);
    assert_eq!(code(&gxe(&["fit", "--penalty", "banded"])), 1);
    let o = gxe(&["fit", "--lambda1", "0.1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--data"));
}

#[test]
fn simulate_tune_fit_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "ar03-m1-linear");
    let train = dir.path().join("sim/train.csv");
    let header = fs::read_to_string(&train).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("y,E1,E2,E3,E4,E5,G1,"));
    let truth = read_json(&dir.path().join("sim/truth.json"));
    assert_eq!(truth["scenario"], "ar03-m1-linear");

    let tuned = dir.path().join("tuned");
    let o = gxe(&["tune", "--data", train.to_str().unwrap(), "--n-lambda1", "12", "--out", tuned.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let best = read_json(&tuned.join("best.json"));
    assert_eq!(best["p"], 30);
    assert!(best["bic"].is_f64());
    let path = fs::read_to_string(tuned.join("path.csv")).unwrap();
    assert!(path.starts_with("lambda1,lambda2,n_main,n_interaction,bic"));
    assert!(path.lines().count() > 12);

    // Refitting at the tuned penalties reproduces the tuned selection.
    let l1 = best["lambda1"].as_f64().unwrap().to_string();
    let l2 = best["lambda2"].as_f64().unwrap().to_string();
    let report = dir.path().join("fit.json");
    let o = gxe(&[
        "fit", "--data", train.to_str().unwrap(), "--lambda1", &l1, "--lambda2", &l2, "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fit = read_json(&report);
    assert_eq!(fit["converged"], true);
    assert_eq!(fit["alpha"].as_array().unwrap().len(), 5);
    for it in fit["interactions"].as_array().unwrap() {
        let g = it["g"].as_str().unwrap();
        assert!(fit["main"].as_array().unwrap().iter().any(|m| m["g"] == g), "interaction without main effect");
    }
    let trace: Vec<f64> =
        fit["objective_trace"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-10));
}

#[test]
fn survival_data_and_methods() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "band1-m2-aft");
    let train = dir.path().join("sim/train.csv");
    assert!(fs::read_to_string(&train).unwrap().starts_with("time,status,"));
    for method in ["MA", "SMCP", "HierMCP"] {
        let out = dir.path().join(format!("{method}.json"));
        let o = gxe(&[
            "fit", "--data", train.to_str().unwrap(), "--method", method, "--lambda1", "0.3", "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{method}: {}", stderr(&o));
        assert_eq!(read_json(&out)["survival"], true);
    }
}

#[test]
fn malformed_csv_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "y,E1,G1\n1,2,x\n").unwrap();
    let o = gxe(&["fit", "--data", bad.to_str().unwrap(), "--lambda1", "0.1", "--out", "unused.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 2"));
    assert!(!Path::new("unused.json").exists());
}

#[test]
fn collinear_e_factors_are_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("y,E1,E2,G1,G2,G3\n");
    for i in 0..20 {
        let e = i as f64 * 0.3 - 2.0;
        text.push_str(&format!("{},{e},{e},{},{},{}\n", i % 7, i % 3, (i / 2) % 3, (i * 5) % 3));
    }
    let path = dir.path().join("dup.csv");
    fs::write(&path, text).unwrap();
    let out = dir.path().join("f.json");
    let o = gxe(&["fit", "--data", path.to_str().unwrap(), "--lambda1", "0.2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "ar03-m1-linear");
    let train = dir.path().join("sim/train.csv");
    let cfg = dir.path().join("gxe.toml");
    fs::write(&cfg, "[tune]\nn_lambda1 = 5\nlambda2 = [0.5, 1.0]\n").unwrap();

    let out = dir.path().join("a");
    let o = gxe(&["--config", cfg.to_str().unwrap(), "tune", "--data", train.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("path.csv")).unwrap().lines().count(), 1 + 10);

    let out = dir.path().join("b");
    let o = gxe(&[
        "--config", cfg.to_str().unwrap(), "tune", "--data", train.to_str().unwrap(), "--n-lambda1", "3", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("path.csv")).unwrap().lines().count(), 1 + 6);

    fs::write(&cfg, "[tune]\nn_lambda = 5\n").unwrap();
    let o = gxe(&["--config", cfg.to_str().unwrap(), "tune", "--data", train.to_str().unwrap(), "--out", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("n_lambda"));
}

#[test]
fn screen_writes_reduced_data_and_map() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "ar03-m1-linear");
    let train = dir.path().join("sim/train.csv");
    let out = dir.path().join("reduced.csv");
    let map = dir.path().join("map.json");
    let o = gxe(&[
        "screen", "--data", train.to_str().unwrap(), "--keep", "6", "--mode", "region", "--out",
        out.to_str().unwrap(), "--map", map.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = read_json(&map);
    let cols: Vec<u64> = m["columns"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(cols.len(), 6);
    assert!(cols.windows(2).all(|w| w[1] == w[0] + 1));
    assert_eq!(m["pvalues"].as_array().unwrap().len(), 30);
    let header = fs::read_to_string(&out).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header.split(',').count(), 1 + 5 + 6);
    assert_eq!(code(&gxe(&["screen", "--data", train.to_str().unwrap(), "--keep", "31", "--out", "x.csv"])), 1);
}

#[test]
fn small_benchmark_and_stability() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = gxe(&[
        "benchmark", "--scenarios", "ar03-m1-linear", "--replicates", "2", "--methods", "proposed,MA", "--n", "80",
        "--p", "30", "--n-lambda1", "6", "--seed", "5", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert_eq!(fs::read_to_string(out.join("replicates.jsonl")).unwrap().lines().count(), 4);

    // The written plan reruns to the same table.
    let again = dir.path().join("again");
    let plan = out.join("plan.json");
    let o = gxe(&["benchmark", "--plan", plan.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(again.join("table.csv")).unwrap(), table);

    simulate(dir.path(), "ar03-m1-linear");
    let st = dir.path().join("st.json");
    let o = gxe(&[
        "stability", "--data", dir.path().join("sim/train.csv").to_str().unwrap(), "--methods", "proposed",
        "--resamples", "3", "--n-lambda1", "6", "--out", st.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_json(&st)["methods"].clone();
    assert_eq!(rows[0]["resamples"], 3);
    let ooi = rows[0]["mean_ooi"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ooi));
}

#[test]
fn echoed_config_reruns_the_same_fit() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "ar03-m1-linear");
    let train = dir.path().join("sim/train.csv");
    let first = dir.path().join("first.json");
    let o = gxe(&[
        "fit", "--data", train.to_str().unwrap(), "--lambda1", "0.3", "--lambda2", "0.4", "--penalty", "laplacian",
        "--out", first.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&first);

    // Scalars in JSON are valid TOML values.
    let mut toml = String::from("[fit]\n");
    for (k, v) in report["config"].as_object().unwrap() {
        if k != "out" {
            toml.push_str(&format!("{k} = {v}\n"));
        }
    }
    let cfg = dir.path().join("echo.toml");
    fs::write(&cfg, toml).unwrap();
    let second = dir.path().join("second.json");
    let o = gxe(&["--config", cfg.to_str().unwrap(), "fit", "--out", second.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let again = read_json(&second);
    assert_eq!(again["penalty"], "laplacian");
    assert_eq!(again["main"], report["main"]);
    assert_eq!(again["interactions"], report["interactions"]);
    assert_eq!(again["objective_trace"], report["objective_trace"]);
}
