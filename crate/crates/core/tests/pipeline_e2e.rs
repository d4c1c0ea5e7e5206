mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::*;
use scenenav::pipeline::{run, RunOptions};
use scenenav::synth::{write_session, SceneSpec};
use scenenav::Error;

const REMOVAL: &str = "frames=60\nwidth=64\nheight=48\nfx=32\nroom=-3 -3 3 3 2.6\n\
    object=56 2.1 -1.0 0 2.4 -0.6 0.6 remove=20\nobject=57 2.1 0.6 0 2.4 1.0 0.6\n\
    waypoint=0 0 0 1.4 0 -15\nwaypoint=59 0 0.05 1.4 0 -15\nscale=0.8\n";

fn session(dir: &Path, spec: &SceneSpec) -> std::path::PathBuf {
    let root = dir.join("session");
    write_session(spec, &root).unwrap();
    root
}

fn value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
}

#[test]
fn batch_run_writes_every_artifact_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let root = session(dir.path(), &scene(ORBIT_ROOM, 30));
    let out = dir.path().join("out");
    let outcome = run(&RunOptions {
        session: root.clone(),
        out: Some(out.clone()),
        eval: Some(root),
        ..RunOptions::default()
    })
    .unwrap();
    for f in [
        "trajectory.txt",
        "cloud.xyz",
        "registry.txt",
        "assignments.txt",
        "report.txt",
        "timings.txt",
        "metrics.txt",
        "metrics.json",
        "nav/occupancy.txt",
        "nav/density.txt",
        "nav/min_height.txt",
        "nav/label.txt",
        "nav/plan.txt",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert_eq!(value(&report, "blocks"), Some("3"));
    assert_eq!(value(&report, "frames"), Some("30"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(json["ate_none"].as_f64().unwrap() < 1e-6, "{json}");
    assert_eq!(outcome.pipeline.trajectory().len(), 30);
    let traj = fs::read_to_string(out.join("trajectory.txt")).unwrap();
    assert_eq!(traj.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).count(), 30);
}

#[test]
fn max_frames_limits_the_stream() {
    let dir = tempfile::tempdir().unwrap();
    let root = session(dir.path(), &scene(ORBIT_ROOM, 30));
    let outcome = run(&RunOptions {
        session: root,
        max_frames: Some(10),
        ..RunOptions::default()
    })
    .unwrap();
    assert_eq!(outcome.report.blocks, 1);
    assert_eq!(outcome.pipeline.trajectory().len(), 10);
}

#[test]
fn removed_object_is_exported_as_removed() {
    let dir = tempfile::tempdir().unwrap();
    let root = session(dir.path(), &SceneSpec::parse(REMOVAL).unwrap());
    let out = dir.path().join("out");
    let outcome = run(&RunOptions {
        session: root,
        out: Some(out.clone()),
        ..RunOptions::default()
    })
    .unwrap();
    assert_eq!(outcome.report.removed, 1);
    let registry = fs::read_to_string(out.join("registry.txt")).unwrap();
    assert!(registry.contains("removed"), "{registry}");
}

#[test]
fn contradicting_layout_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = session(dir.path(), &scene(ORBIT_ROOM, 20));
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "block_size=5\n").unwrap();
    let err = run(&RunOptions {
        session: root,
        config_file: Some(cfg),
        ..RunOptions::default()
    })
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn corrupt_frame_reports_its_block() {
    let dir = tempfile::tempdir().unwrap();
    let root = session(dir.path(), &scene(ORBIT_ROOM, 30));
    fs::write(root.join("frame_14/sensor_depth.f32"), [0u8; 7]).unwrap();
    let err = run(&RunOptions {
        session: root,
        ..RunOptions::default()
    })
    .unwrap_err();
    assert!(err.to_string().contains("14"), "{err}");
}

#[test]
fn command_line_tools_generate_run_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("room.spec");
    fs::write(&spec_path, scene(ORBIT_ROOM, 20).to_text()).unwrap();
    let root = dir.path().join("session");
    let gen = Command::new(env!("CARGO_BIN_EXE_synthgen"))
        .args(["--spec", spec_path.to_str().unwrap(), "--out", root.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));

    let out = dir.path().join("out");
    let res = Command::new(env!("CARGO_BIN_EXE_scenenav"))
        .args(["--session", root.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(["--eval", root.to_str().unwrap(), "--seed", "3"])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert_eq!(value(&stdout, "blocks"), Some("2"));
    assert!(value(&stdout, "ate_rmse_none").is_some(), "{stdout}");
    assert!(out.join("metrics.txt").is_file());

    let missing = Command::new(env!("CARGO_BIN_EXE_scenenav"))
        .args(["--session", dir.path().join("nowhere").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!missing.status.success());
}
