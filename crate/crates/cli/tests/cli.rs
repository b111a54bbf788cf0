//! End-to-end checks of the `feedergraph` binary: exit codes, stage
//! tagging, flag handling.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy/run.toml")
}

fn feedergraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feedergraph"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn full_run_succeeds_and_points_at_the_report() {
    let out = tempfile::tempdir().unwrap();
    let run = feedergraph(&[
        "run",
        "--config",
        fixture().to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", stderr(&run));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("6 stage(s) done"), "stdout: {stdout}");
    assert!(stdout.contains("report.json"));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["ingest"]["total_rows"], 40);
    assert_eq!(report["ingest"]["access"], 13);
    assert_eq!(report["ingest"]["egress"], 23);
    assert_eq!(report["ingest"]["rejected"], 4);
}

#[test]
fn failures_are_stage_tagged_and_name_the_missing_file() {
    let out = tempfile::tempdir().unwrap();
    let run = feedergraph(&[
        "ingest",
        "--config",
        fixture().to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(!run.status.success());
    let msg = stderr(&run);
    assert!(msg.contains("stage ingest"), "stderr: {msg}");
    assert!(msg.contains("grid.geojson"), "stderr: {msg}");
}

#[test]
fn stage_flag_and_subcommand_are_interchangeable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for out in [&a, &b] {
        for stage in ["tessellate", "ingest"] {
            let run = feedergraph(&[
                stage,
                "--config",
                fixture().to_str().unwrap(),
                "--out",
                out.path().to_str().unwrap(),
            ]);
            assert!(run.status.success(), "{}", stderr(&run));
        }
    }
    let via_sub = feedergraph(&[
        "estimate",
        "--config",
        fixture().to_str().unwrap(),
        "--out",
        a.path().to_str().unwrap(),
    ]);
    let via_flag = feedergraph(&[
        "run",
        "--stage",
        "estimate",
        "--config",
        fixture().to_str().unwrap(),
        "--out",
        b.path().to_str().unwrap(),
    ]);
    assert!(via_sub.status.success() && via_flag.status.success());
    let left = std::fs::read(a.path().join("field_estimates.csv")).unwrap();
    let right = std::fs::read(b.path().join("field_estimates.csv")).unwrap();
    assert_eq!(left, right);
}

#[test]
fn unknown_stage_name_is_rejected() {
    let out = tempfile::tempdir().unwrap();
    let run = feedergraph(&[
        "run",
        "--stage",
        "interpolate",
        "--config",
        fixture().to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(!run.status.success());
    assert!(stderr(&run).contains("unknown stage"), "{}", stderr(&run));
}

#[test]
fn unreadable_config_fails_cleanly() {
    let run = feedergraph(&["run", "--config", "/nonexistent/run.toml"]);
    assert!(!run.status.success());
    assert!(stderr(&run).starts_with("error:"), "{}", stderr(&run));
}
