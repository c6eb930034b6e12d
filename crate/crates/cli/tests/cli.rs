use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn isac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isac")).args(args).env_remove("ISAC_THREADS").output().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn shipped_configs_validate() {
    for f in ["fixed_site.json", "multi_ue.json"] {
        let out = isac(&["validate-config", "--config", configs().join(f).to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{f}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok:"));
    }
}

#[test]
fn bad_configs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("syntax.json", "{ not json"),
        ("field.json", r#"{"trails": 2}"#),
        ("xi.json", r#"{"xi0": 1.5}"#),
        ("method.json", r#"{"methods": ["nope"]}"#),
    ];
    for (name, text) in cases {
        let p = write(dir.path(), name, text);
        assert_eq!(isac(&["validate-config", "--config", &p]).status.code(), Some(1), "{name}");
        assert_eq!(isac(&["run", "--config", &p]).status.code(), Some(1), "{name}");
    }
    assert_eq!(isac(&["validate-config", "--config", "/nonexistent.json"]).status.code(), Some(1));
    let ok = write(dir.path(), "ok.json", "{}");
    assert_eq!(isac(&["run", "--config", &ok, "--methods", "alg3"]).status.code(), Some(1));
}

#[test]
fn list_methods_filters_by_scenario() {
    let all = String::from_utf8(isac(&["list-methods"]).stdout).unwrap();
    assert_eq!(all.lines().count(), 10);
    let multi = String::from_utf8(isac(&["list-methods", "--scenario", "multi-ue"]).stdout).unwrap();
    let names: Vec<&str> = multi.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["alg3", "oracle-csi"]);
}

#[test]
fn run_writes_identical_csv_for_identical_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"t1": [32]}"#);
    let mut files = Vec::new();
    for (i, threads) in ["1", "2"].iter().enumerate() {
        let out = dir.path().join(format!("r{i}.csv"));
        let o = Command::new(env!("CARGO_BIN_EXE_isac"))
            .args(["run", "--config", &cfg, "--methods", "oracle,sbl-on-grid", "--snr-db", "-5,20"])
            .args(["--trials", "2", "--seed", "9", "--trace", "--out", out.to_str().unwrap()])
            .env("ISAC_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.with_extension("trace.jsonl").exists());
        files.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let text = String::from_utf8(files.remove(0)).unwrap();
    assert!(text.lines().any(|l| l.starts_with("fixed-site,oracle,-5.0,32,")));
    assert!(text.lines().any(|l| l.contains(",sbl-on-grid,20.0,") && l.contains(",nmse_hr_db,")));
}

#[test]
fn partial_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"t1": [1], "trials": 1, "snr_db": [10]}"#);
    let o = isac(&["run", "--config", &cfg, "--methods", "orthogonal-reference,oracle"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    // rows of the successful method are still written
    assert!(String::from_utf8_lossy(&o.stdout).contains(",oracle,"));
}

#[test]
fn scenario_override_resets_method_list() {
    let o = isac(&[
        "run", "--config", configs().join("fixed_site.json").to_str().unwrap(), "--scenario", "multi-ue",
        "--methods", "oracle-csi", "--trials", "1", "--snr-db", "30",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("multi-ue,oracle-csi,30.0,"));
}
