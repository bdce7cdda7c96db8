use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn fkvi(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fkvi"))
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn summary(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn constant_terminal_value_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let o = fkvi(&config("constant_kappa.toml"), dir.path(), &["solve"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(dir.path());
    assert_eq!(s["command"], "solve");
    assert_eq!(s["results"]["u"], serde_json::json!([2.0]));
    assert_eq!(s["results"]["std"], serde_json::json!([0.0]));
    assert_eq!(s["config_sha256"].as_str().unwrap().len(), 64);
    let csv = fs::read_to_string(dir.path().join("solution.csv")).unwrap();
    assert!(csv.starts_with("node,time,y0_mean,y0_std\n"));
    assert!(!dir.path().join(".fkvi.lock").exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(config("constant_kappa.toml")).unwrap().replace("[grid]", "[grid]\nstepz = 3");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, text).unwrap();
    let o = fkvi(&cfg, &dir.path().join("out"), &["solve"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));
}

#[test]
fn structural_violation_is_reported_with_a_witness() {
    let dir = tempfile::tempdir().unwrap();
    // F = y with a claimed mu_F = 0 is not monotone
    let text = fs::read_to_string(config("constant_kappa.toml"))
        .unwrap()
        .replace("f = [{ const = 0.0 }]", "f = [{ var = \"y0\" }]");
    let cfg = dir.path().join("violating.toml");
    fs::write(&cfg, text).unwrap();
    let o = fkvi(&cfg, &dir.path().join("out"), &["solve"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("violated") && err.contains("margin"), "{err}");
}

#[test]
fn missing_config_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fkvi(&dir.path().join("nope.toml"), dir.path(), &["solve"]);
    assert!(!o.status.success());
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".fkvi.lock"), b"").unwrap();
    let o = fkvi(&config("constant_kappa.toml"), dir.path(), &["solve"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("summary.json").exists());
}

#[test]
fn compat_check_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let o = fkvi(&config("compat_indicator.toml"), dir.path(), &["compat-check"]);
    assert!(o.status.success());
    assert_eq!(summary(dir.path())["results"]["report"]["pass"], true);

    let dir = tempfile::tempdir().unwrap();
    let o = fkvi(&config("compat_violating.toml"), dir.path(), &["compat-check"]);
    assert!(o.status.success());
    assert_eq!(summary(dir.path())["results"]["report"]["pass"], false);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn reruns_are_byte_identical_and_seed_override_changes_the_hash() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config("robin_flux.toml");
    let small = ["--quiet", "--seed", "5", "forward-sim"];
    assert!(fkvi(&cfg, a.path(), &small).status.success());
    assert!(fkvi(&cfg, b.path(), &small).status.success());
    assert_eq!(fs::read(a.path().join("summary.json")).unwrap(), fs::read(b.path().join("summary.json")).unwrap());

    assert!(fkvi(&cfg, c.path(), &["--quiet", "--seed", "6", "forward-sim"]).status.success());
    let (sa, sc) = (summary(a.path()), summary(c.path()));
    assert_ne!(sa["config_sha256"], sc["config_sha256"]);
    assert_eq!(sc["config"]["ensemble"]["seed"], 6);
}

#[test]
fn quiet_suppresses_the_headline() {
    let dir = tempfile::tempdir().unwrap();
    let o = fkvi(&config("constant_kappa.toml"), dir.path(), &["--quiet", "solve"]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
}
