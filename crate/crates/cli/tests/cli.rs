use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bosdf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bosdf"))
        .args(args)
        .output()
        .expect("spawn bosdf")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    let text = format!(
        "name = tiny\n\
         objective.kind = synthetic\n\
         objective.grid_size = 40\n\
         objective.lengthscale = 0.1\n\
         kernel.lengthscale = 0.1\n\
         refit_every = 0\n\
         policy.rules = ucb-sdf,bucb\n\
         delay.model = poisson\n\
         delay.mean = 2\n\
         horizon = 15\n\
         seeds = 0..2\n\
         output = {}\n",
        dir.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn presets_are_listed() {
    let o = bosdf(&["presets"]);
    assert!(o.status.success());
    let names: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert!(names.contains(&"synthetic-stochastic".to_string()));
    assert!(names.contains(&"contextual-multitask".to_string()));
}

#[test]
fn preset_dry_run_applies_flags_and_overrides() {
    let o = bosdf(&[
        "preset",
        "synthetic-fixed",
        "--dry-run",
        "--override",
        "horizon=40",
        "--delay.fixed",
        "4",
        "--seeds=0..3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("horizon = 40\n"));
    assert!(out.contains("delay.fixed = 4\n"));
    assert!(out.contains("seeds = 0..3\n"));
    assert!(out.contains("name = synthetic-fixed\n"));
}

#[test]
fn bad_input_exits_nonzero() {
    let o = bosdf(&["preset", "synthetic-fixed", "--dry-run", "--no.such.key", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no.such.key"));
    let o = bosdf(&["preset", "not-a-preset"]);
    assert!(!o.status.success());
    let o = bosdf(&["run", "/nonexistent/file.cfg"]);
    assert!(!o.status.success());
    let o = bosdf(&["preset", "synthetic-fixed", "--dry-run", "--horizon", "zero"]);
    assert!(!o.status.success());
}

#[test]
fn run_then_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = bosdf(&["run", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ucb-sdf"));
    let root = dir.path().join("out").join("tiny");
    let summary = fs::read_to_string(root.join("summary.csv")).unwrap();
    fs::remove_file(root.join("summary.csv")).unwrap();
    fs::remove_file(root.join("final.csv")).unwrap();

    let o = bosdf(&["summarize", root.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(root.join("summary.csv")).unwrap(), summary);
    assert!(root.join("final.csv").exists());
}

#[test]
fn summarize_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = bosdf(&["summarize", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn sweep_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = bosdf(&[
        "sweep",
        "--param",
        "m",
        "--values",
        "1,4",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("m,method,runs,"));
    assert_eq!(out.lines().count(), 1 + 2 * 2);
    assert!(dir.path().join("out/tiny/sweep_m.csv").exists());
    assert!(dir.path().join("out/tiny/sweep_m/4/bucb/seed1.csv").exists());
}

#[test]
fn verify_prints_checks() {
    let o = bosdf(&["verify", "synthetic-fixed"]);
    let out = stdout(&o);
    assert!(o.status.success(), "{out}{}", stderr(&o));
    assert!(out.lines().count() >= 4);
    assert!(out.lines().all(|l| l.starts_with("PASS ")));
}
