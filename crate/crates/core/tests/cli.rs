use std::path::Path;
use std::process::{Command, Output};

use dff::dataio::{read_checkpoint, read_trajectory};

fn dff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dff"))
        .args(args)
        .env("DFF_NUM_THREADS", "1")
        .output()
        .expect("spawn dff")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(dff(&[]).status.code(), Some(2));
    assert_eq!(dff(&["train", "--data", "x.traj"]).status.code(), Some(2));
    assert_eq!(dff(&["analyze", "--metrics", "bogus"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dff(&["sample", "--checkpoint", &path(dir.path(), "missing.ckpt"), "--n", "3", "--out", &path(dir.path(), "s.traj")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error:"));

    let out = dff(&["gen-data", "--system", "no-such-system", "--n", "3", "--out", &path(dir.path(), "g.traj")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown system"));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_dff"))
        .args(["gradcheck", "--fresh"])
        .env("DFF_NUM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_rejects_mismatched_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let a = path(dir.path(), "a.traj");
    let b = path(dir.path(), "b.traj");
    assert!(dff(&["gen-data", "--system", "harmonic-chain", "--cg", "--n", "50", "--out", &a]).status.success());
    assert!(dff(&["gen-data", "--system", "gaussian2d", "--n", "50", "--out", &b]).status.success());
    let out = dff(&["analyze", "--ref", &a, "--model", &b, "--metrics", "pwd", "--out-dir", &path(dir.path(), "r")]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(msg.contains("shape mismatch"), "{msg}");
    assert!(msg.contains("5 beads x 3 dims") && msg.contains("1 beads x 2 dims"), "{msg}");
}

#[test]
fn gradcheck_passes_on_a_fresh_model() {
    let out = dff(&["gradcheck", "--fresh", "--seed", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn train_sample_simulate_analyze_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = path(dir.path(), "data.traj");
    let cfg = path(dir.path(), "cfg.json");
    let ckpt = path(dir.path(), "model.ckpt");
    std::fs::write(
        &cfg,
        r#"{"model": {"n_beads": 5, "dim": 3, "n_layers": 1, "n_features": 8, "levels": 50},
            "train": {"batch_size": 16, "iterations": 30, "validation_interval": 10, "validation_samples": 20}}"#,
    )
    .unwrap();
    assert!(dff(&["gen-data", "--system", "harmonic-chain", "--cg", "--n", "400", "--seed", "3", "--out", &data]).status.success());

    let out = dff(&["train", "--data", &data, "--config", &cfg, "--out-checkpoint", &ckpt]);
    assert!(out.status.success(), "{}", stderr(&out));
    let history = std::fs::read_to_string(format!("{ckpt}.loss.csv")).unwrap();
    assert!(history.lines().count() > 1);
    let checkpoint = read_checkpoint(&ckpt).unwrap();
    assert_eq!(checkpoint.model.config().n_beads, 5);
    assert!(checkpoint.training.is_some());

    let iid = path(dir.path(), "iid.traj");
    assert!(dff(&["sample", "--checkpoint", &ckpt, "--n", "20", "--seed", "1", "--out", &iid]).status.success());
    assert_eq!(read_trajectory(&iid).unwrap().n_frames(), 20);

    let sim = path(dir.path(), "sim.traj");
    let out = dff(&[
        "simulate", "--checkpoint", &ckpt, "--kt", "1", "--noise-level", "2", "--steps", "40", "--save-every", "10",
        "--replicas", "2", "--init", &data, "--out", &sim,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let traj = read_trajectory(&sim).unwrap();
    assert_eq!(traj.n_frames(), 8);
    assert_eq!((traj.n_beads(), traj.dim()), (5, 3));

    let report = dir.path().join("report");
    let out = dff(&[
        "analyze", "--ref", &data, "--model", &sim, "--metrics", "pwd,dihedral,contact,rmsd",
        "--pwd-offset", "1", "--out-dir", report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics.is_object());
    assert!(std::fs::read_dir(&report).unwrap().count() > 1);
}
