use std::path::Path;
use std::process::{Command, Output};

fn skyfix(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skyfix"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn skyfix")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = skyfix(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn generate_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        ok(d.path(), &["generate", "--seed", "7", "--sensors", "50", "--flights", "20", "--output-dir", "."]);
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 3);
    assert_eq!(fa, fb);
}

#[test]
fn missing_output_directory_writes_nothing() {
    let root = tempfile::tempdir().unwrap();
    let out = skyfix(root.path(), &["generate", "--seed", "7", "--output-dir", "absent"]);
    assert!(!out.status.success());
    assert!(files(root.path()).is_empty());
    assert!(!root.path().join("absent").exists());
}

#[test]
fn flags_override_config_file() {
    let root = tempfile::tempdir().unwrap();
    std::fs::create_dir(root.path().join("out")).unwrap();
    std::fs::write(root.path().join("run.toml"), "seed = 3\nn_sensors = 12\nn_flights = 3\noutput_dir = \"missing\"\n").unwrap();
    ok(root.path(), &["--config", "run.toml", "generate", "--output-dir", "out"]);
    let sensors = std::fs::read_to_string(root.path().join("out/sensors.csv")).unwrap();
    assert_eq!(sensors.lines().count(), 13);
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path();
    assert_eq!(skyfix(dir, &["--config", "nope.toml", "generate"]).status.code(), Some(1));
    assert_eq!(skyfix(dir, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(skyfix(dir, &["--help"]).status.code(), Some(0));
    assert_eq!(skyfix(dir, &["localize", "--solver", "l3"]).status.code(), Some(1));
    assert_eq!(skyfix(dir, &["generate", "--flights", "0"]).status.code(), Some(1));

    ok(dir, &["generate", "--seed", "2", "--sensors", "12", "--flights", "3"]);
    std::fs::write(dir.join("broken.csv"), "id,latitude\n1,abc\n").unwrap();
    let out = skyfix(dir, &["mask", "--measurements", "broken.csv"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.join("masked.csv").exists());
}

#[test]
fn full_pipeline_scores_a_small_scenario() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path();
    ok(dir, &["generate", "--seed", "11", "--sensors", "30", "--flights", "8", "--noise-ns", "0"]);
    ok(dir, &["mask"]);
    ok(dir, &["sync"]);
    ok(dir, &["--threads", "2", "localize"]);
    let out = skyfix(dir, &["score"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("trmse"), "{stdout}");

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("score.json")).unwrap()).unwrap();
    let trmse = report["trmse_m"].as_f64().unwrap();
    assert!(trmse < 50.0, "trmse {trmse} m");
    assert!(report["pass_coverage"].as_bool().unwrap());

    ok(dir, &["localize", "--solver", "ls", "--submission", "ls.csv"]);
    ok(dir, &["score", "--submission", "ls.csv", "--score-report", "ls.json"]);
    let ls: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("ls.json")).unwrap()).unwrap();
    let diff = (ls["trmse_m"].as_f64().unwrap() - trmse).abs();
    assert!(diff < 1.0, "solvers differ by {diff} m on clean data");
}
