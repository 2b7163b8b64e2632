//! End-to-end tests for the command-line binary.

use std::process::{Command, Output};

use code_rsic::data::procedural_texture;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_code-rsic"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn stage2_refuses_to_start_without_stage1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "--out",
        dir.path().to_str().unwrap(),
        "train-stage2",
        "--count",
        "4",
        "--steps",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("stage 1"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_profile_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "--out",
        dir.path().to_str().unwrap(),
        "--profile",
        "galactic",
        "train-stage1",
        "--steps",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("lock"), b"").unwrap();
    let out = run(&[
        "--out",
        dir.path().to_str().unwrap(),
        "train-stage1",
        "--count",
        "4",
        "--steps",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("locked"), "stderr: {}", stderr(&out));
}

#[test]
fn compress_decompress_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("input.png");
    procedural_texture(64, 5).save_png(&png).unwrap();
    let bitfile = dir.path().join("image.crs");

    let out = run(&[
        "compress",
        "--input",
        png.to_str().unwrap(),
        "--output",
        bitfile.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let bytes = std::fs::read(&bitfile).unwrap();
    assert_eq!(&bytes[0..4], b"CRS0");

    let decoded = dir.path().join("decoded.png");
    let out = run(&[
        "decompress",
        "--input",
        bitfile.to_str().unwrap(),
        "--output",
        decoded.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let img = code_rsic::ImageTensor::load_png(&decoded).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
}

#[test]
fn missing_input_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "compress",
        "--input",
        dir.path().join("absent.png").to_str().unwrap(),
        "--output",
        dir.path().join("out.crs").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr(&out));
}

#[test]
fn evaluate_writes_per_image_rows_plus_mean() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "--out",
        dir.path().to_str().unwrap(),
        "evaluate",
        "--count",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("evaluation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7, "header + 5 rows + mean, got: {csv}");
    assert!(lines[0].starts_with("image,"));
    assert!(lines[6].starts_with("mean,"));
}

/// Full training chain at minimal step counts: stage ordering, artifact
/// layout, enhancement gating and codebook export.
#[test]
fn training_chain_produces_usable_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let od = out_dir.to_str().unwrap();

    let out = run(&["--out", od, "train-stage1", "--count", "4", "--steps", "2"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(out_dir.join("manifest.toml").exists());
    assert!(out_dir.join("stage1.safetensors").exists());
    assert!(out_dir.join("codebook.cbk").exists());
    assert!(out_dir.join("stage1_loss.csv").exists());
    assert!(!out_dir.join("lock").exists(), "lock released after training");

    // enhancement is gated on the final stage
    let png = dir.path().join("x.png");
    procedural_texture(64, 6).save_png(&png).unwrap();
    let bitfile = dir.path().join("x.crs");
    run(&["compress", "--input", png.to_str().unwrap(), "--output", bitfile.to_str().unwrap()]);
    let out = run(&[
        "--out",
        od,
        "enhance",
        "--input",
        bitfile.to_str().unwrap(),
        "--output",
        dir.path().join("xhat.png").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("stage 3"), "stderr: {}", stderr(&out));

    let out = run(&["--out", od, "train-stage2", "--count", "4", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let out = run(&["--out", od, "train-stage3", "--count", "4", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let enhanced = dir.path().join("xhat.png");
    let out = run(&[
        "--out",
        od,
        "enhance",
        "--input",
        bitfile.to_str().unwrap(),
        "--output",
        enhanced.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let img = code_rsic::ImageTensor::load_png(&enhanced).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));

    let out = run(&["--out", od, "stats", "--count", "4"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("codes used"));

    let cbk = dir.path().join("export.cbk");
    let out = run(&["--out", od, "export-codebook", "--output", cbk.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let bytes = std::fs::read(&cbk).unwrap();
    assert_eq!(&bytes[0..4], b"CBK1");
}
