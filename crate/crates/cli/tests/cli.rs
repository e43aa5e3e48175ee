use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seeds = [1, 2]

[data]
kind = "planted"
n_train = 500
n_validation = 600
subgroup_fraction = 0.1
seed = 1

[backend]
dim = 512

[discovery]
representations = ["agnostic", "task_label"]
k = 6
n_runs = 2

[augment.session]
max_proposals = 40
max_labels = 24
batch = 6
global_every = 8
max_global_updates = 3
"#;

fn tdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdg"))
        .args(args)
        .env_remove("TDG_AUTH_TOKEN")
        .output()
        .unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, CONFIG).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_all(cfg: &str, out: &Path, extra: &[&str]) -> Output {
    let out = out.to_string_lossy();
    let mut args = vec!["run", "-c", cfg, "--output-dir", &out];
    args.extend_from_slice(extra);
    tdg(&args)
}

#[test]
fn stage_without_its_input_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let o = tdg(&["estimate", "-c", &cfg, "--output-dir", &out.to_string_lossy()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("missing dependency"), "{err}");
    assert!(err.contains("tdg discover"), "{err}");
}

#[test]
fn rerun_gives_byte_identical_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = run_all(&cfg, &a, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run_all(&cfg, &b, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ra = fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, fs::read(b.join("report.json")).unwrap());

    let report: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(report["stage"], "evaluate");
    assert_eq!(report["payload"]["summary"]["mean"]["rows"].as_array().unwrap().len(), 7);

    // Completed stages are left alone; --force recomputes the same bytes.
    let o = run_all(&cfg, &a, &[]);
    assert!(o.status.success());
    assert_eq!(stderr(&o).matches("up to date").count(), 9, "{}", stderr(&o));
    let o = run_all(&cfg, &a, &["--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(ra, fs::read(a.join("report.json")).unwrap());
    assert!(fs::read_to_string(a.join("report/summary.txt")).unwrap().contains("tdg_all"));
}

#[test]
fn overrides_invalidate_downstream_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let outs = out.to_string_lossy().into_owned();
    assert!(run_all(&cfg, &out, &[]).status.success());

    let o = tdg(&["select", "-c", &cfg, "--output-dir", &outs, "--ic-gate", "-1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    let o = tdg(&["select", "-c", &cfg, "--output-dir", &outs, "--ic-gate", "-1", "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
    // Everything after select now disagrees with the chain.
    let o = tdg(&["evaluate", "-c", &cfg, "--output-dir", &outs, "--ic-gate", "-1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stale"), "{}", stderr(&o));
    let o = run_all(&cfg, &out, &["--ic-gate", "-1", "--from", "augment-oracle", "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(text.contains("RejectHighInterference"), "{text}");
}

#[test]
fn bad_arguments_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run").to_string_lossy().into_owned();
    let o = tdg(&["ingest", "-c", &cfg, "--output-dir", &out, "--methods", "target,nonsense"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nonsense"));
    let o = tdg(&["ingest", "-c", "/does/not/exist.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let o = tdg(&["ingest", "-c", &cfg, "--output-dir", &out, "--seed-list", ""]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = tdg(&["default-config"]);
    assert!(o.status.success());
    let p = dir.path().join("default.toml");
    fs::write(&p, &o.stdout).unwrap();
    let out = dir.path().join("run").to_string_lossy().into_owned();
    let o = tdg(&["ingest", "-c", &p.to_string_lossy(), "--output-dir", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("run/data.json").exists());
}

#[test]
fn serve_requires_a_token() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let o = run_all(&cfg, &out, &["--to", "select"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = tdg(&["serve", "-c", &cfg, "--output-dir", &out.to_string_lossy(), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("TDG_AUTH_TOKEN"));
    let o = tdg(&["serve", "-c", &cfg, "--output-dir", &out.to_string_lossy(), "--seed", "9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seed 9"));
}
