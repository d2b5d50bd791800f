//! End-to-end checks of the command-line surface.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trustyseg"))
}

fn small_args(cmd: &mut Command) -> &mut Command {
    for kv in [
        "class_count=4",
        "unseen_count=1",
        "dim=8",
        "grid_h=6",
        "grid_w=6",
        "samples=6",
        "steps=25",
        "n_heads=2",
        "noise=0.2",
    ] {
        cmd.arg("--set").arg(kv);
    }
    cmd
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    let status = small_args(bin().arg("gen-data"))
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(data.join("dataset.txt").exists());
    assert!(data.join("text_tokens.tgt").exists());
    assert!(data.join("sample_00000/labels.tgt").exists());

    let status = small_args(bin().arg("train"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap();
    assert!(status.success());
    for file in ["config.txt", "report.txt", "report.kv", "trace.csv"] {
        assert!(run.join(file).exists(), "{file} missing");
    }

    let output = small_args(bin().arg("eval"))
        .arg("--params")
        .arg(run.join("params"))
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert!(output.status.success());
    let eval_stdout = String::from_utf8(output.stdout).unwrap();
    assert!(eval_stdout.contains("pAcc"), "unexpected eval output: {eval_stdout}");

    // the eval numbers must match the training report exactly
    let report = std::fs::read_to_string(run.join("report.txt")).unwrap();
    let eval_line = eval_stdout.lines().nth(1).unwrap().trim();
    assert!(
        report.contains(eval_line),
        "training report {report:?} lacks eval line {eval_line:?}"
    );

    let image = dir.path().join("pred.ppm");
    let status = small_args(bin().arg("export"))
        .arg("--data")
        .arg(&data)
        .arg("--sample")
        .arg("1")
        .arg("--params")
        .arg(run.join("params"))
        .arg("--out")
        .arg(&image)
        .status()
        .unwrap();
    assert!(status.success());
    let bytes = std::fs::read(&image).unwrap();
    assert_eq!(&bytes[..3], b"P6\n");
}

#[test]
fn ablate_and_sweep_emit_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tables");
    let output = small_args(bin().arg("ablate"))
        .arg("--set")
        .arg("steps=8")
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let table = String::from_utf8(output.stdout).unwrap();
    for row in ["(a) baseline", "(b) trusty token", "(d) full, weighted map"] {
        assert!(table.contains(row), "missing row {row} in:\n{table}");
    }
    assert!(out.join("ablation.txt").exists());

    let output = small_args(bin().arg("sweep-gamma"))
        .arg("--set")
        .arg("steps=8")
        .arg("--gammas")
        .arg("0,10")
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let table = String::from_utf8(output.stdout).unwrap();
    assert_eq!(table.lines().count(), 3, "two gamma rows plus header:\n{table}");
    assert!(out.join("gamma_sweep.txt").exists());
}

#[test]
fn bad_input_fails_with_nonzero_exit() {
    let output = bin()
        .arg("train")
        .arg("--set")
        .arg("warmup_fraction=2.0")
        .arg("--out")
        .arg("/nonexistent-run")
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("error:"), "stderr was: {stderr}");

    let output = bin()
        .arg("eval")
        .arg("--params")
        .arg("/no/such/dir")
        .output()
        .unwrap();
    assert!(!output.status.success());
}
