use isac_core::experiment::{find_method, methods, trial_rng, write_csv};
use isac_core::{run_experiment, ExperimentOutput, IsacError, RunOptions, Scenario, SimulationConfig};
use rand::Rng;

fn small_fixed() -> SimulationConfig {
    SimulationConfig {
        methods: vec!["oracle".into(), "orthogonal-reference".into(), "sbl-on-grid".into()],
        t1: vec![32],
        snr_db: vec![10.0, 40.0],
        trials: 2,
        seed: 3,
        ..Default::default()
    }
}

fn small_multi() -> SimulationConfig {
    SimulationConfig {
        scenario: Scenario::MultiUe,
        methods: vec!["oracle-csi".into(), "alg3".into()],
        users: 3,
        t2: vec![16],
        snr_db: vec![20.0],
        trials: 2,
        ..Default::default()
    }
}

fn csv(out: &ExperimentOutput) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(&out.rows, &mut buf).unwrap();
    buf
}

fn metric(out: &ExperimentOutput, method: &str, snr: f64, name: &str) -> f64 {
    out.rows.iter().find(|r| r.method == method && r.snr_db == snr && r.metric == name).unwrap().mean
}

#[test]
fn runs_are_reproducible_and_thread_independent() {
    let cfg = small_fixed();
    let a = run_experiment(&cfg, &RunOptions { threads: Some(1), trace: false }).unwrap();
    let b = run_experiment(&cfg, &RunOptions { threads: Some(3), trace: false }).unwrap();
    assert!(a.failures.is_empty(), "{:?}", a.failures);
    assert_eq!(csv(&a), csv(&b));
    let header = String::from_utf8(csv(&a)).unwrap();
    assert!(header.starts_with("scenario,method,snr_db,t1,t2,metric,mean,stderr,trials,seed0\n"));
    let other = run_experiment(&SimulationConfig { seed: 4, ..cfg }, &RunOptions::default()).unwrap();
    assert_ne!(csv(&a), csv(&other));
}

#[test]
fn oracle_is_error_free_at_high_snr() {
    let out = run_experiment(&small_fixed(), &RunOptions::default()).unwrap();
    assert_eq!(metric(&out, "oracle", 40.0, "ber"), 0.0);
    assert!(metric(&out, "oracle", 10.0, "se") < metric(&out, "oracle", 40.0, "se"));
    assert!(metric(&out, "sbl-on-grid", 40.0, "nmse_hr_db") < metric(&out, "sbl-on-grid", 10.0, "nmse_hr_db"));
    let ebn0 = metric(&out, "oracle", 10.0, "ebn0_db");
    assert!((ebn0 - (10.0 + 10.0 * (0.5f64 / 0.5 / 2.0).log10())).abs() < 1e-12);
}

#[test]
fn multiue_sweep_reports_localization() {
    let out = run_experiment(&small_multi(), &RunOptions { threads: None, trace: true }).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    assert!(out.rows.iter().any(|r| r.method == "alg3" && r.metric == "localization_error"));
    assert!(out.rows.iter().any(|r| r.method == "oracle-csi" && r.metric == "ber"));
    assert!(out.traces.iter().all(|t| t.method == "alg3"));
    assert!(!out.traces.is_empty());
}

#[test]
fn short_frames_fail_per_trial_not_per_run() {
    let cfg = SimulationConfig { t1: vec![1], trials: 2, methods: vec!["orthogonal-reference".into(), "oracle".into()], ..small_fixed() };
    let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(out.failures.len(), 2 * 2);
    assert!(out.failures.iter().all(|f| f.method == "orthogonal-reference"));
    assert!(out.rows.iter().any(|r| r.method == "oracle" && r.metric == "ber"));
}

#[test]
fn configuration_errors() {
    let bad = |cfg: SimulationConfig| cfg.validate().unwrap_err();
    assert!(matches!(bad(SimulationConfig { trials: 0, ..Default::default() }), IsacError::Config(_)));
    assert!(matches!(bad(SimulationConfig { xi0: 1.0, ..Default::default() }), IsacError::Config(_)));
    assert!(matches!(bad(SimulationConfig { snr_db: vec![], ..Default::default() }), IsacError::Config(_)));
    assert!(matches!(bad(SimulationConfig { t1: vec![0], ..Default::default() }), IsacError::Config(_)));
    assert!(matches!(
        bad(SimulationConfig { methods: vec!["alg3".into()], ..Default::default() }),
        IsacError::UnknownMethod(_)
    ));
    assert!(matches!(bad(SimulationConfig { users: 7, ..small_multi() }), IsacError::Config(_)));
    assert!(SimulationConfig::from_json(r#"{"trails": 3}"#).is_err());
    assert!(run_experiment(&SimulationConfig { trials: 0, ..Default::default() }, &RunOptions::default()).is_err());
}

#[test]
fn config_json_round_trip() {
    let cfg = small_multi();
    let back = SimulationConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(back, cfg);
    let partial = SimulationConfig::from_json(r#"{"scenario": "multi-ue", "trials": 5}"#).unwrap();
    assert_eq!(partial.trials, 5);
    assert_eq!(partial.scenario, Scenario::MultiUe);
    assert_eq!(partial.selected_methods().unwrap().len(), 2);
}

#[test]
fn method_registry() {
    assert_eq!(methods().iter().filter(|m| m.scenario == Scenario::FixedSite).count(), 8);
    assert!(find_method(Scenario::MultiUe, "alg3").is_ok());
    assert!(find_method(Scenario::FixedSite, "alg3").is_err());
    assert!("fixed".parse::<Scenario>().is_err());
}

#[test]
fn trial_streams_are_distinct() {
    let a: u64 = trial_rng(1, 0).random();
    let b: u64 = trial_rng(1, 1).random();
    let c: u64 = trial_rng(1, 0).random();
    assert_ne!(a, b);
    assert_eq!(a, c);
}
