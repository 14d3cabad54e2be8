use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faithsplat"))
        .args(args)
        .env("FAITHSPLAT_THREADS", "1")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

fn fails_with(args: &[&str], code: &str) {
    let o = run(args);
    assert!(!o.status.success(), "{args:?} succeeded");
    let prefix = format!("error: {code}: ");
    assert!(stderr(&o).starts_with(&prefix), "{args:?}: {}", stderr(&o));
}

const SPEC: &str = "frames = 4\nwidth = 32\nheight = 24\nfocal = 20\nground_ahead = 8\nbuildings_per_side = 2\neval_offsets = 1,3\n";
const CONFIG: &str = "iterations = 20\nlog_interval = 10\ndensify_from = 10\ndensify_until = 10\ndensify_interval = 10\n\
expansion_start = 20\nexpansion_stride = 10\nfinetune_iterations = 4\nrounds = 2\nmax_offset = 2\nnovel_frame_stride = 2\n";

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_pipeline_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.txt"), SPEC).unwrap();
    std::fs::write(d.join("cfg.txt"), CONFIG).unwrap();
    let (data, ck, fused) = (d.join("data"), d.join("ck"), d.join("fused"));

    ok(&["gen-scene", "--spec", s(&d.join("spec.txt")), "--out", s(&data)]);
    for f in ["spec.txt", "cameras.txt", "frames/000.ppm", "eval/o3/003.ppm", "overlap.csv", "gt_scene.fsplat"] {
        assert!(data.join(f).exists(), "missing {f}");
    }

    ok(&["train", "--data", s(&data), "--config", s(&d.join("cfg.txt")), "--out", s(&ck)]);
    for f in ["cloud.fsplat", "ledger.fledg", "cameras.txt", "state.txt", "config.txt", "metrics.csv"] {
        assert!(ck.join(f).exists(), "missing {f}");
    }

    let eig = d.join("e.eigf");
    ok(&["eig-map", "--ckpt", s(&ck), "--cam", "1:3", "--out", s(&eig)]);
    for f in ["e.eigf", "e.pgm", "e_preview.pgm", "e.txt"] {
        assert!(d.join(f).exists(), "missing {f}");
    }
    assert!(std::fs::read_to_string(d.join("e.txt")).unwrap().contains("camera = 1:3"));

    ok(&["fuse", "--ckpt", s(&ck), "--data", s(&data), "--restorer", "oracle", "--out", s(&fused)]);
    let metrics = std::fs::read_to_string(fused.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("phase,round,iteration"));
    assert_eq!(metrics.lines().filter(|l| l.starts_with("train,")).count(), 2);
    let fuse_rows: Vec<&str> = metrics.lines().filter(|l| l.starts_with("fuse,")).collect();
    assert_eq!(fuse_rows.len(), 2);
    assert!(fuse_rows[1].contains("frame_stage"), "{}", fuse_rows[1]);
    assert!(fused.join("restored/r1_000.ppm").exists());
    assert!(fused.join("restored/r2_002.txt").exists());

    let eval = d.join("eval.csv");
    ok(&["eval", "--ckpt", s(&fused), "--data", s(&data), "--out", s(&eval), "--offsets", "0,3"]);
    let table = std::fs::read_to_string(&eval).unwrap();
    assert!(table.starts_with("frame,offset,psnr,ssim"));
    assert_eq!(table.lines().count(), 1 + 2 * 4);

    let sweep = d.join("sweep.csv");
    ok(&["sweep", "--ckpt", s(&fused), "--data", s(&data), "--out", s(&sweep)]);
    let table = std::fs::read_to_string(&sweep).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("all,")).count(), 6);
}

#[test]
fn argument_errors_are_reported_with_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("nope");
    fails_with(&["eval", "--ckpt", s(&missing), "--data", s(&missing), "--out", s(&d.join("x.csv")), "--tau", "2"], "invalid-argument");
    fails_with(&["sweep", "--ckpt", s(&missing), "--data", s(&missing), "--out", s(&d.join("x.csv")), "--thresholds", "0.1,-1"], "invalid-argument");
    fails_with(&["eig-map", "--ckpt", s(&missing), "--cam", "0", "--out", s(&d.join("e.eigf"))], "io");
    fails_with(&["gen-scene", "--out", s(&d.join("a/b/c"))], "io");

    std::fs::write(d.join("bad.txt"), "frames = 4\ncolour = red\n").unwrap();
    fails_with(&["gen-scene", "--spec", s(&d.join("bad.txt")), "--out", s(&d.join("g"))], "unknown-key");
    std::fs::write(d.join("bad.txt"), "frames = many\n").unwrap();
    fails_with(&["gen-scene", "--spec", s(&d.join("bad.txt")), "--out", s(&d.join("g"))], "bad-value");
}

#[test]
fn unknown_restorer_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.txt"), SPEC).unwrap();
    std::fs::write(d.join("cfg.txt"), "iterations = 0\n").unwrap();
    let (data, ck) = (d.join("data"), d.join("ck"));
    ok(&["gen-scene", "--spec", s(&d.join("spec.txt")), "--out", s(&data)]);
    ok(&["train", "--data", s(&data), "--config", s(&d.join("cfg.txt")), "--out", s(&ck)]);
    fails_with(&["fuse", "--ckpt", s(&ck), "--data", s(&data), "--restorer", "diffusion", "--out", s(&d.join("f"))], "invalid-argument");
    assert!(!d.join("f").exists());
    fails_with(&["eig-map", "--ckpt", s(&ck), "--cam", "9", "--out", s(&d.join("e.eigf"))], "invalid-argument");
    fails_with(&["eig-map", "--ckpt", s(&ck), "--cam", "1:x", "--out", s(&d.join("e.eigf"))], "invalid-argument");
}

#[test]
fn usage_errors_exit_nonzero() {
    let o = run(&["train"]);
    assert!(!o.status.success());
    let o = run(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("gen-scene"));
}
