use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mfeig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfeig"))
        .args(args)
        .env("MFEIG_WORKERS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Linear-Gaussian problem with a coarsened cheap model; small enough to run
/// the whole pipeline in well under a second.
fn small_config() -> Value {
    json!({
        "master_seed": 11,
        "prior": [{"mean": 0.0, "std_dev": 1.0}],
        "noise": {"form": "additive", "sigma": [0.5]},
        "models": [
            {"id": 0, "linear": {"scale": 1.0}, "cost": 1.0},
            {"id": 1, "linear": {"scale": 0.9}, "cost": 0.05}
        ],
        "designs": {"linspace": {"start": 0.5, "stop": 1.5, "num": 3}},
        "budget": {"w_budget": 4.0e4, "n_in_0": 50},
        "pilot": {"n_pilot": 40},
        "sweep": {"n_trials": 3},
        "reuse_inner": true
    })
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Runs pilot, design and sweep into `dir/out`.
fn run_pipeline(dir: &Path, cfg: &Value) -> std::path::PathBuf {
    let config = write_config(dir, cfg);
    let out = dir.join("out");
    let o = out.to_str().unwrap();
    assert_ok(&mfeig(&["pilot", "-c", &config, "-o", o]));
    let pilot = out.join("pilot.json");
    assert_ok(&mfeig(&["design", "-c", &config, "-p", pilot.to_str().unwrap(), "-o", o]));
    let design = out.join("design.json");
    assert_ok(&mfeig(&["sweep", "-c", &config, "-d", design.to_str().unwrap(), "-o", o]));
    out
}

#[test]
fn pipeline_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(dir.path(), &small_config());
    for f in ["pilot.json", "design.json", "sweep.csv", "baseline.csv", "reduction.csv", "summary.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["n_designs"], 3);
    assert_eq!(summary["means"].as_array().unwrap().len(), 3);
    assert!(summary["design_averaged_ratio"].as_f64().unwrap() > 0.0);
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("design_index,design_value,trial,estimate"));
    assert_eq!(sweep.lines().count(), 1 + 3 * 3);
}

#[test]
fn pilot_prints_cost_and_correlation_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let out = mfeig(&["pilot", "-c", &config, "-o", dir.path().to_str().unwrap()]);
    assert_ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("corr(u0)"));
    // cost of model 1 is (50 + 1) * 0.05
    assert!(stdout.contains("2.550000"), "{stdout}");
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = run_pipeline(a.path(), &small_config());
    let ob = run_pipeline(b.path(), &small_config());
    for f in ["pilot.json", "design.json", "sweep.csv", "baseline.csv", "reduction.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(oa.join(f)).unwrap(),
            std::fs::read(ob.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let mut files = Vec::new();
    for workers in ["1", "3"] {
        let o = dir.path().join(format!("w{workers}"));
        let out = Command::new(env!("CARGO_BIN_EXE_mfeig"))
            .args(["--workers", workers, "pilot", "-c", &config, "-o", o.to_str().unwrap()])
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert_ok(&out);
        files.push(std::fs::read(o.join("pilot.json")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn too_few_pilot_samples_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    // two models need at least three pilot samples
    cfg["pilot"]["n_pilot"] = json!(2);
    let config = write_config(dir.path(), &cfg);
    let out = mfeig(&["pilot", "-c", &config, "-o", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_pilot"));
}

#[test]
fn missing_or_malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = mfeig(&["pilot", "-c", missing.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"master_seed\": ").unwrap();
    let out = mfeig(&["pilot", "-c", bad.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn budget_below_one_high_fidelity_evaluation_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    let config = write_config(dir.path(), &cfg);
    let o = dir.path().to_str().unwrap();
    assert_ok(&mfeig(&["pilot", "-c", &config, "-o", o]));
    // one u0 evaluation costs 51
    cfg["budget"]["w_budget"] = json!(50.0);
    let config = write_config(dir.path(), &cfg);
    let pilot = dir.path().join("pilot.json");
    let out = mfeig(&["design", "-c", &config, "-p", pilot.to_str().unwrap(), "-o", o]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget"));
}

#[test]
fn mc_only_family_gives_plain_monte_carlo() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["budget"]["families"] = json!(["MC"]);
    let out = run_pipeline(dir.path(), &cfg);
    let design = read_json(&out.join("design.json"));
    assert_eq!(design["family"], "MC");
    assert_eq!(design["alpha"], json!([]));
    assert_eq!(design["groups"].as_array().unwrap().len(), 1);
    // floor(4e4 / 51) samples
    assert_eq!(design["groups"][0]["size"], 784);
}

#[test]
fn design_prints_projected_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let o = dir.path().to_str().unwrap();
    assert_ok(&mfeig(&["pilot", "-c", &config, "-o", o]));
    let pilot = dir.path().join("pilot.json");
    let out = mfeig(&["design", "-c", &config, "-p", pilot.to_str().unwrap(), "-o", o]);
    assert_ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("projected variance"));
    assert!(stdout.contains("projected reduction ratio"));
}

#[test]
fn single_trial_has_null_variances() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["sweep"]["n_trials"] = json!(1);
    let out = run_pipeline(dir.path(), &cfg);
    let summary = read_json(&out.join("summary.json"));
    assert!(summary["variances"].as_array().unwrap().iter().all(Value::is_null));
    assert!(summary["design_averaged_variance"].is_null());
    assert!(summary["means"].as_array().unwrap().iter().all(Value::is_f64));
}

#[test]
fn single_design_is_the_argmax() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["designs"] = json!({"list": [[0.75]]});
    let out = run_pipeline(dir.path(), &cfg);
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["xi_star"], json!([0.75]));
    assert_eq!(summary["xi_star_index"], 0);
}

#[test]
fn sweep_needs_only_the_design_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(dir.path(), &small_config());
    std::fs::remove_file(out.join("pilot.json")).unwrap();
    let config = dir.path().join("config.json");
    let again = dir.path().join("again");
    assert_ok(&mfeig(&[
        "sweep",
        "-c",
        config.to_str().unwrap(),
        "-d",
        out.join("design.json").to_str().unwrap(),
        "-o",
        again.to_str().unwrap(),
    ]));
    assert_eq!(
        std::fs::read(out.join("sweep.csv")).unwrap(),
        std::fs::read(again.join("sweep.csv")).unwrap()
    );
}
