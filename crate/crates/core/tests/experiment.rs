use std::path::PathBuf;

use activerep::config::ExperimentConfig;
use activerep::experiment::{
    read_results, read_table, run_all, run_experiment, summarize, Failure, FAILURES_SCHEMA, THREADS_ENV,
};
use activerep::Error;

fn small_config(seeds: &[u64]) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.seeds = seeds.to_vec();
    cfg
}

#[test]
fn threaded_runs_match_sequential_order() {
    let cfg = small_config(&[4, 1, 3]);
    std::env::remove_var(THREADS_ENV);
    let seq = run_all(&cfg).unwrap();
    std::env::set_var(THREADS_ENV, "3");
    let par = run_all(&cfg).unwrap();
    std::env::remove_var(THREADS_ENV);
    assert_eq!(seq, par);
    let seeds: Vec<u64> = seq.rows.iter().map(|r| r.seed).collect();
    let first = |s: u64| seeds.iter().position(|&x| x == s).unwrap();
    assert!(first(4) < first(1) && first(1) < first(3));
}

#[test]
fn tables_round_trip_and_summaries_agree() {
    let cfg = small_config(&[0]);
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, dir.path()).unwrap();
    assert!(out.failures.is_empty());
    let per = |name: &str| out.rows.iter().filter(|r| r.strategy == name).count();
    assert!(per("target-aware") > 1);
    assert_eq!(per("passive"), per("target-aware"));
    assert_eq!(per("target-agnostic"), per("target-aware"));
    let back = read_results(&dir.path().join("results.csv")).unwrap();
    assert_eq!(back.len(), out.rows.len());
    for (a, b) in back.iter().zip(&out.rows) {
        assert_eq!((a.strategy.as_str(), a.epoch, a.cumulative_budget), (b.strategy.as_str(), b.epoch, b.cumulative_budget));
        assert!((a.test_mse - b.test_mse).abs() <= 1e-12 * b.test_mse.abs().max(1.0));
    }
    assert_eq!(summarize(&back).ratios.len(), summarize(&out.rows).ratios.len());
    let failures: Vec<Failure> = read_table(&dir.path().join("failures.csv"), FAILURES_SCHEMA).unwrap();
    assert!(failures.is_empty());
    for name in ["summary.csv", "ratios.csv"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
}

#[test]
fn foreign_schema_versions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    std::fs::write(&path, "# activerep-results v2\nscenario,strategy\n").unwrap();
    assert!(matches!(read_results(&path), Err(Error::Schema(_))));
    std::fs::write(&path, "scenario,strategy\n").unwrap();
    assert!(read_results(&path).is_err());
}
