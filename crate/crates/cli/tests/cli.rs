use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const BROWNIAN: &str = r#"
[model]
x0 = 0.0
mu = "constant{c=0}"
sigma = "constant{c=1}"
k_mu = "constant"
k_sigma = "constant"

[sim]
T = 1.0
N = 256
paths = 2000
seed = 11

[checks]
run = ["martingale", "qv", "holder"]
"#;

fn sve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sve"))
        .args(args)
        .env_remove("SVE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run_in(dir: &Path, config: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", config.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    sve(&args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn brownian_run_passes_and_emits_versioned_reports() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "brownian.toml", BROWNIAN);
    let out = tmp.path().join("out");
    let o = run_in(&out, &cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let hash = json(&out.join("summary.json"))["config_hash"].clone();
    for name in ["martingale", "qv", "holder"] {
        let doc = json(&out.join(format!("{name}.json")));
        assert_eq!(doc["schema"], "sve-report/1");
        assert_eq!(doc["config_hash"], hash);
        assert_eq!(doc["passed"], true, "{name}");
        assert!(doc["certifies"].as_str().is_some_and(|c| !c.is_empty()));
        let header = fs::read_to_string(out.join(format!("{name}.csv"))).unwrap();
        assert!(header.starts_with("quantity,scale,value,stderr\n"));
    }
    let entry = &json(&out.join("martingale.json"))["report"]["functions"][0]["entries"][0];
    for field in ["f", "lag", "statistic", "z", "passed"] {
        assert!(entry.get(field).is_some(), "missing {field}");
    }
    let ensemble = fs::read_to_string(out.join("ensemble.csv")).unwrap();
    assert!(ensemble.starts_with("path_id,t,X,A,M,Z,dB\n"));
    assert!(out.join("run.svearch").exists());
}

#[test]
fn runs_are_idempotent_and_thread_count_invariant() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "b.toml", &BROWNIAN.replace("paths = 2000", "paths = 1100"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run_in(&a, &cfg, &["--threads", "1"]).status.code(), Some(0));
    assert_eq!(run_in(&b, &cfg, &["--threads", "4"]).status.code(), Some(0));
    for file in ["run.svearch", "martingale.json", "qv.json", "holder.json", "ensemble.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn replay_matches_for_any_thread_count() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "b.toml", &BROWNIAN.replace("run = [\"martingale\", \"qv\", \"holder\"]", ""));
    let out = tmp.path().join("out");
    assert_eq!(run_in(&out, &cfg, &["--threads", "2"]).status.code(), Some(0));
    let archive = out.join("run.svearch");
    for threads in ["1", "2", "3"] {
        let o = sve(&["replay", archive.to_str().unwrap(), "--threads", threads]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
}

#[test]
fn replay_detects_edited_seed_and_truncation() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "b.toml", &BROWNIAN.replace("run = [\"martingale\", \"qv\", \"holder\"]", ""));
    let out = tmp.path().join("out");
    assert_eq!(run_in(&out, &cfg, &[]).status.code(), Some(0));
    let bytes = fs::read(out.join("run.svearch")).unwrap();
    let archive = sve_cli::archive::RunArchive::from_bytes(&bytes).unwrap();

    let mut edited = archive.clone();
    edited.seed += 1;
    let edited_path = tmp.path().join("edited.svearch");
    // re-seed in place so the stored digest is the original one
    let mut raw = bytes.clone();
    let at = 8 + 2 + 4 + archive.tool_version.len() + 4 + archive.config.len();
    raw[at..at + 8].copy_from_slice(&edited.seed.to_le_bytes());
    fs::write(&edited_path, &raw).unwrap();
    let o = sve(&["replay", edited_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(sve_cli::EXIT_MISMATCH), "{}", stderr(&o));
    assert!(stderr(&o).contains("mismatch at statistic"));

    let truncated = tmp.path().join("short.svearch");
    fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let o = sve(&["replay", truncated.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(sve_cli::EXIT_CORRUPT), "{}", stderr(&o));
}

#[test]
fn inadmissible_kernel_fails_with_divergence_report() {
    let tmp = TempDir::new().unwrap();
    let text = BROWNIAN
        .replace("k_sigma = \"constant\"", "k_sigma = \"fractional{alpha=0.5}\"")
        .replace("[\"martingale\", \"qv\", \"holder\"]", "[\"kernel-assumptions\"]");
    let cfg = write_config(tmp.path(), "frac.toml", &text);
    let out = tmp.path().join("out");
    let o = run_in(&out, &cfg, &[]);
    assert_eq!(o.status.code(), Some(sve_cli::EXIT_CHECKS_FAILED), "{}", stderr(&o));
    let doc = json(&out.join("kernel-assumptions.json"));
    assert_eq!(doc["passed"], false);
    let notes = doc["report"]["integrability"]["notes"].to_string();
    assert!(notes.contains("L²"), "{notes}");
}

#[test]
fn config_errors_name_the_key() {
    let tmp = TempDir::new().unwrap();
    let text = BROWNIAN.replace(
        "run = [\"martingale\", \"qv\", \"holder\"]",
        "run = [\"kernel-assumptions\"]\np = 3.0\ngamma = 0.1",
    );
    let cfg = write_config(tmp.path(), "p3.toml", &text);
    let o = run_in(&tmp.path().join("out"), &cfg, &[]);
    assert_eq!(o.status.code(), Some(sve_cli::EXIT_ERROR));
    let err = stderr(&o);
    assert!(err.contains("p must exceed 4") && err.contains("checks.p"), "{err}");

    let cfg = write_config(tmp.path(), "typo.toml", &BROWNIAN.replace("seed = 11", "sede = 11"));
    let err = stderr(&run_in(&tmp.path().join("out"), &cfg, &[]));
    assert!(err.contains("sede"), "{err}");
}

#[test]
fn seed_override_and_format_flag() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "b.toml", &BROWNIAN.replace("[\"martingale\", \"qv\", \"holder\"]", "[\"qv\"]"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run_in(&a, &cfg, &["--format", "json"]).status.code(), Some(0));
    assert_eq!(run_in(&b, &cfg, &["--seed", "12", "--format", "csv"]).status.code(), Some(0));
    assert!(a.join("qv.json").exists() && !a.join("qv.csv").exists());
    assert!(b.join("qv.csv").exists() && !b.join("qv.json").exists());
    let sa = sve_cli::archive::RunArchive::read(&a.join("run.svearch")).unwrap();
    let sb = sve_cli::archive::RunArchive::read(&b.join("run.svearch")).unwrap();
    assert_eq!((sa.seed, sb.seed), (11, 12));
    assert_ne!(sa.statistics, sb.statistics);
}

#[test]
fn check_kernel_and_mollify_demo() {
    let tmp = TempDir::new().unwrap();
    let text = r#"
[model]
x0 = 1.0
mu = "linear{a=1, b=-1}"
sigma = "sqrt_abs"
k_mu = "constant"
k_sigma = "fractional{alpha=0.25}"

[sim]
T = 1.0
N = 64
paths = 10
seed = 1

[checks]
p = 14.0
gamma = 0.17857142857142858
"#;
    let cfg = write_config(tmp.path(), "m.toml", text);
    let out = tmp.path().join("k");
    let o = sve(&["check-kernel", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = json(&out.join("kernel-assumptions.json"));
    assert!(doc["report"]["regularity"]["passed"].as_bool().unwrap());

    let out = tmp.path().join("m");
    let o = sve(&["mollify-demo", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("mollify-sigma-table.csv")).unwrap();
    assert!(table.starts_with("coefficient,level,t,x,value\n"));
    assert_eq!(table.lines().count(), 1 + 5 * 201);
}

#[test]
fn output_directory_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "b.toml", &BROWNIAN.replace("[\"martingale\", \"qv\", \"holder\"]", "[]"));
    let target = tmp.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_sve"))
        .args(["run", cfg.to_str().unwrap()])
        .env("SVE_OUT_DIR", &target)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(target.join("run.svearch").exists());
}
