//! Smoke tests for the command-line surface: determinism of dataset
//! generation, and the usage-error exit code contract.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_georefine"))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn gen_is_deterministic_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        let status = bin()
            .args(["gen", "--count", "6", "--height", "32", "--width", "32", "--seed", "5"])
            .arg("--out")
            .arg(tmp.path().join(sub))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = dir_bytes(&tmp.path().join("a"));
    let b = dir_bytes(&tmp.path().join("b"));
    assert!(!a.is_empty());
    assert_eq!(a, b, "same seed must write identical datasets");
}

#[test]
fn bad_extent_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["gen", "--count", "2", "--height", "30", "--width", "30", "--seed", "1"])
        .arg("--out")
        .arg(tmp.path().join("x"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn unknown_flag_is_rejected() {
    let status = bin().args(["gen", "--frobnicate"]).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn train_rejects_negative_grid_probabilities() {
    let tmp = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["gen", "--count", "4", "--height", "16", "--width", "16", "--seed", "2"])
        .arg("--out")
        .arg(tmp.path().join("d"))
        .status()
        .unwrap();
    assert!(status.success());

    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "rho1 = -0.5\niterations = 1\n").unwrap();
    let out = bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--dataset")
        .arg(tmp.path().join("d").join("manifest.tsv"))
        .arg("--out")
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("error"), "stderr should explain the failure: {msg}");
}
