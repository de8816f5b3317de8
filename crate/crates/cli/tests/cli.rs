use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_activerep"));
    c.env("RUST_LOG", "warn").env_remove("ACTIVEREP_THREADS");
    c
}

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn run(out: &Path) -> String {
    let cfg = config("synthetic.toml");
    ok(bin()
        .args(["run", "--config", cfg.to_str().unwrap(), "--seeds", "0,1", "--out", out.to_str().unwrap()])
        .output()
        .unwrap())
}

#[test]
fn runs_are_byte_identical_and_summarize_round_trips() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let stdout = run(a.path());
    run(b.path());
    assert!(stdout.contains("budget ratio"));
    for name in ["results.csv", "failures.csv", "summary.csv", "ratios.csv", "config.toml"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
    }

    let s = tempfile::tempdir().unwrap();
    let results = a.path().join("results.csv");
    ok(bin()
        .args(["summarize", results.to_str().unwrap(), "--out", s.path().to_str().unwrap()])
        .output()
        .unwrap());
    for name in ["summary.csv", "ratios.csv"] {
        assert_eq!(
            std::fs::read(s.path().join(name)).unwrap(),
            std::fs::read(a.path().join(name)).unwrap(),
            "{name} from summarize differs from run"
        );
    }
}

#[test]
fn saved_config_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    let cfg = config("synthetic.toml");
    ok(bin()
        .args(["run", "--config", cfg.to_str().unwrap(), "--seeds", "2", "--strategy", "passive", "--strategy", "target-aware"])
        .args(["--out", a.path().to_str().unwrap()])
        .output()
        .unwrap());
    let b = tempfile::tempdir().unwrap();
    let saved = a.path().join("config.toml");
    ok(bin()
        .args(["run", "--config", saved.to_str().unwrap(), "--out", b.path().to_str().unwrap()])
        .output()
        .unwrap());
    assert_eq!(
        std::fs::read(a.path().join("results.csv")).unwrap(),
        std::fs::read(b.path().join("results.csv")).unwrap()
    );
    let results = std::fs::read_to_string(a.path().join("results.csv")).unwrap();
    assert!(!results.contains("target-agnostic"));
}

#[test]
fn summarize_rejects_other_schema_versions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    std::fs::write(&path, "# activerep-results v9\nscenario\n").unwrap();
    let out = bin().args(["summarize", path.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn gen_truth_writes_one_model_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("synthetic.toml");
    let stdout = ok(bin()
        .args(["gen-truth", "--config", cfg.to_str().unwrap(), "--seeds", "5..7", "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap());
    assert_eq!(stdout.lines().count(), 2);
    let names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.starts_with("truth-seed5")));
    assert!(names.iter().any(|n| n.starts_with("truth-seed6")));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let cfg = config("synthetic.toml");
    let dir = tempfile::tempdir().unwrap();
    for extra in [["--seeds", "3..3"], ["--strategy", "greedy"]] {
        let out = bin()
            .args(["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
            .args(extra)
            .output()
            .unwrap();
        assert!(!out.status.success());
    }
    let out = bin().args(["gen-truth", "--config", config("pendulum.toml").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
}
