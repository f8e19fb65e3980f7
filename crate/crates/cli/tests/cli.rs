use std::path::PathBuf;
use std::process::{Command, Output};

fn drape(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drape"))
        .args(args)
        .env("DRAPE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn demo() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("data/demo_plm.csv")
        .display()
        .to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn estimate_on_the_demo_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("est.json");
    let o = drape(&["estimate", &demo(), "--x", "x1", "--y", "y", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let theta = v["theta"][0].as_f64().unwrap();
    let sigma = v["sigma"][0][0].as_f64().unwrap();
    assert!(theta.is_finite());
    assert!(sigma > 0.0);
    assert_eq!(v["method"], "drape");
    assert_eq!(v["config_digest"].as_str().unwrap().len(), 64);
    assert!(stdout(&o).contains("x1:"));
}

#[test]
fn ols_estimate_is_reproducible() {
    let a = drape(&["estimate", &demo(), "--x", "x1", "--y", "y", "--method", "ols"]);
    let b = drape(&["estimate", &demo(), "--x", "x1", "--y", "y", "--method", "ols"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn standardized_estimate_is_in_original_units() {
    let raw = drape(&["estimate", &demo(), "--x", "x1", "--y", "y", "--method", "ols"]);
    let std = drape(&["estimate", &demo(), "--x", "x1", "--y", "y", "--method", "ols", "--standardize"]);
    let theta = |o: &Output| {
        let text = stdout(o);
        let json = &text[text.find('{').unwrap()..];
        serde_json::from_str::<serde_json::Value>(json).unwrap()["theta"][0].as_f64().unwrap()
    };
    assert!((theta(&raw) - theta(&std)).abs() < 1e-9);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(drape(&["estimate", &demo(), "--x", "x1"]).status.code(), Some(2));
    assert_eq!(drape(&["simulate", "--repeats", "0"]).status.code(), Some(2));
    assert_eq!(drape(&["simulate", "--setting", "cubic", "--repeats", "1"]).status.code(), Some(2));
    assert_eq!(drape(&["verify", "--suite", "everything"]).status.code(), Some(2));
    assert_eq!(drape(&["estimate", &demo(), "--x", "x1", "--y", "y", "--method", "magic"]).status.code(), Some(2));
    assert_eq!(drape(&["estimate", &demo(), "--x", "nope", "--y", "y"]).status.code(), Some(2));
    assert_eq!(drape(&["estimate", &demo(), "--x", "x1", "--y", "y", "--folds", "1"]).status.code(), Some(2));
}

#[test]
fn simulate_smoke_run_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cov.csv");
    let json = dir.path().join("cov.json");
    let svg = dir.path().join("cov.svg");
    let o = drape(&[
        "simulate", "--setting", "plm", "--noise", "normal", "--method", "drape", "--repeats", "20", "--n", "300",
        "--seed", "4", "--out", csv.to_str().unwrap(), "--json", json.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let cov = v["coverage"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cov));
    assert_eq!(v["records"].as_array().unwrap().len(), 20);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 21);
    assert!(stdout(&o).contains("coverage="));
    let p = drape(&["plot", json.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert!(p.status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn verify_suites() {
    let thm3 = drape(&["verify", "--suite", "thm3"]);
    assert_eq!(thm3.status.code(), Some(0), "{}", stdout(&thm3));
    assert_eq!(stdout(&thm3).matches("PASS").count(), 5);
    let grid = drape(&["verify", "--suite", "grid"]);
    assert_eq!(grid.status.code(), Some(0));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "folds = 4\nseed = 9\n").unwrap();
    let from_file = drape(&["--config", cfg.to_str().unwrap(), "estimate", &demo(), "--x", "x1", "--y", "y", "--method", "ols"]);
    assert!(from_file.status.success());
    let text = stdout(&from_file);
    assert!(text.contains("\"seed\": 9"), "{text}");
    let flagged = drape(&[
        "--config", cfg.to_str().unwrap(), "estimate", &demo(), "--x", "x1", "--y", "y", "--method", "ols", "--seed", "11",
    ]);
    assert!(stdout(&flagged).contains("\"seed\": 11"));
    std::fs::write(&cfg, "fold = 4\n").unwrap();
    let bad = drape(&["--config", cfg.to_str().unwrap(), "verify", "--suite", "grid"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn tune_writes_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tuned.toml");
    let o = drape(&["tune", "--setting", "add", "--trials", "2", "--datasets", "1", "--n", "200", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let back = drape(&["--config", out.to_str().unwrap(), "estimate", &demo(), "--x", "x1", "--y", "y", "--method", "ols"]);
    assert!(back.status.success());
}

#[test]
fn mse_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mse.csv");
    let o = drape(&[
        "mse", "--setting", "int", "--n-train", "300", "--n-test", "200", "--repeats", "2", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for m in ["spline", "basis", "resmooth", "difference"] {
        assert!(text.contains(m), "{text}");
    }
    assert!(std::fs::read_to_string(&out).unwrap().starts_with("repeat,target,method,mse"));
}

#[test]
fn generate_round_trips_through_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gen.csv");
    let o = drape(&["generate", "--setting", "add", "--noise", "t4", "--n", "300", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let e = drape(&["estimate", out.to_str().unwrap(), "--x", "x1", "--y", "y", "--method", "plr"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
}
