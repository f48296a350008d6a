//! Black-box tests of the command-line binary: exit codes, artifact
//! emission, and byte-stable reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_throttlesim"))
}

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn mobile_config() -> String {
    repo_path("configs/mobile.toml").display().to_string()
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn dir_bytes(d: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(d)
        .expect("read dir")
        .map(|e| e.expect("entry").path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).expect("read file"),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn calibrate_emits_report_with_passing_oracle() {
    let out_dir = tempfile::tempdir().expect("tempdir");
    let out = run_ok(&[
        "--config",
        &mobile_config(),
        "--out-dir",
        &out_dir.path().display().to_string(),
        "calibrate",
        "--targets",
        &repo_path("targets/default_tp_targets.csv").display().to_string(),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("calibration ok"));
    let summary = out_dir.path().join("calibration_summary.json");
    let text = std::fs::read_to_string(summary).expect("summary written");
    assert!(text.contains("\"oracle_ok\": true"), "oracle flag missing:\n{text}");
    assert!(out_dir.path().join("calibration_fit.csv").exists());
    assert!(out_dir.path().join("calibration_oracle.csv").exists());
}

#[test]
fn run_artifacts_are_byte_identical_across_reruns() {
    let d1 = tempfile::tempdir().expect("tempdir");
    let d2 = tempfile::tempdir().expect("tempdir");
    for d in [&d1, &d2] {
        run_ok(&[
            "--config",
            &mobile_config(),
            "--out-dir",
            &d.path().display().to_string(),
            "run",
            "tp_characterization",
        ]);
    }
    let (b1, b2) = (dir_bytes(d1.path()), dir_bytes(d2.path()));
    assert!(b1.len() >= 2, "expected a table and a summary, got {}", b1.len());
    assert_eq!(b1, b2, "reruns must be byte-identical");
}

#[test]
fn report_digests_emitted_summaries() {
    let out_dir = tempfile::tempdir().expect("tempdir");
    let dir_arg = out_dir.path().display().to_string();
    let empty = run_ok(&["--out-dir", &dir_arg, "report"]);
    assert!(String::from_utf8_lossy(&empty.stdout).contains("no summaries"));

    run_ok(&["--config", &mobile_config(), "--out-dir", &dir_arg, "run", "tp_prewarm"]);
    let out = run_ok(&["--out-dir", &dir_arg, "report"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("== tp_prewarm"));
    assert!(stdout.contains("plateau_count"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let cfg = tempfile::NamedTempFile::new().expect("tempfile");
    std::fs::write(cfg.path(), "bogus_knob = 1\n").expect("write config");
    let out = bin()
        .args(["--config", &cfg.path().display().to_string(), "run", "tp_prewarm"])
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(2), "unknown key must exit 2");
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn unknown_experiment_is_rejected() {
    let out = bin().args(["run", "warp_drive"]).output().expect("binary runs");
    assert_eq!(out.status.code(), Some(2), "unknown experiment must exit 2");
}

#[test]
fn flat_targets_fail_calibration_with_exit_three() {
    // Identical timings for every class make the fitted weights
    // non-monotone, which the calibrator must refuse.
    let mut csv = String::from("class,freq_ghz,cores,tp_us\n");
    let classes = [
        "scalar64b",
        "128b_light",
        "128b_heavy",
        "256b_light",
        "256b_heavy",
        "512b_light",
        "512b_heavy",
    ];
    for class in classes {
        for freq in ["1.0", "1.2", "1.4"] {
            for cores in ["1", "2"] {
                let tp = if class == "scalar64b" {
                    "0.000000"
                } else if cores == "1" {
                    "5.000000"
                } else {
                    "9.000000"
                };
                csv.push_str(&format!("{class},{freq},{cores},{tp}\n"));
            }
        }
    }
    let targets = tempfile::NamedTempFile::new().expect("tempfile");
    std::fs::write(targets.path(), csv).expect("write targets");
    let out_dir = tempfile::tempdir().expect("tempdir");
    let out = bin()
        .args([
            "--config",
            &mobile_config(),
            "--out-dir",
            &out_dir.path().display().to_string(),
            "calibrate",
            "--targets",
            &targets.path().display().to_string(),
        ])
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(3), "degenerate targets must exit 3");
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
