use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn golden_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/golden/experiment.toml")
}

fn icl_assoc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl-assoc"))
        .args(args)
        .arg("--config")
        .arg(golden_config())
        .arg("--output")
        .arg(out)
        .env_remove("ICL_ASSOC_DEVICE")
        .env_remove("ICL_ASSOC_MEMORY_CAP")
        .output()
        .unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap()
}

#[test]
fn run_then_rerun_reuses_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let first = icl_assoc(&["run"], dir.path());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let summary = stdout_json(&first);
    assert_eq!(summary["complete"], true);
    assert!(summary["reused"].as_array().unwrap().is_empty());

    let second = stdout_json(&icl_assoc(&["run"], dir.path()));
    assert!(second["executed"].as_array().unwrap().is_empty());

    let verify = icl_assoc(&["verify"], dir.path());
    assert!(verify.status.success());
    assert!(stdout_json(&verify)["discrepancies"].as_array().unwrap().is_empty());
}

#[test]
fn stage_before_its_inputs_reports_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = icl_assoc(&["analyze"], dir.path());
    assert!(!o.status.success());
    let e = stderr_json(&o);
    assert_eq!(e["stage"], "analyze");
    assert!(e["kind"].is_string() && e["message"].is_string());
}

#[test]
fn bad_memory_cap_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_icl-assoc"))
        .args(["run", "--config"])
        .arg(golden_config())
        .arg("--output")
        .arg(dir.path())
        .env("ICL_ASSOC_MEMORY_CAP", "lots")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert_eq!(stderr_json(&o)["kind"], "config");
}

#[test]
fn show_config_round_trips_through_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    let o = icl_assoc(&["show-config"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let table: toml::Table = text.parse().unwrap();
    assert_eq!(table["seed"].as_integer(), Some(7));
    assert!(table.contains_key("trials"));
}
