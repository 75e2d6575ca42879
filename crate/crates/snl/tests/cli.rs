//! End-to-end checks of the command-line binary: exit codes, config-file
//! merging, and artifact round-trips.

use std::path::Path;
use std::process::{Command, Output};

fn snl_bin() -> &'static str {
    env!("CARGO_BIN_EXE_snl")
}

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(snl_bin()).args(args).current_dir(dir).output().unwrap()
}

#[test]
fn latency_estimate_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["latency", "estimate", "--relu-count", "1000"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("0.021"));

    let out = run(
        &["latency", "fit", "--points", "12300:0.45,28700:0.56,49200:1.19,197000:3.94,229400:4.61"],
        dir.path(),
    );
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("0.019"), "unexpected fit output: {text}");
}

#[test]
fn config_error_exit_code_is_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["pretrain", "--arch", "nonsense", "--dataset", "two-gaussians", "--out", "x.ckpt"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["latency", "fit", "--points", "garbage"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["--not-a-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // A file that is not a checkpoint at all is a configuration error.
    std::fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let out = run(&["report", "retention", "--checkpoint", "bad.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    // A real checkpoint that is cut short is an integrity violation.
    let out = run(
        &["pretrain", "--arch", "mlp:2,4,2", "--dataset", "two-gaussians", "--n", "40",
          "--epochs", "1", "--out", "ok.ckpt"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = std::fs::read(dir.path().join("ok.ckpt")).unwrap();
    std::fs::write(dir.path().join("cut.ckpt"), &bytes[..bytes.len() - 16]).unwrap();
    let out = run(&["report", "retention", "--checkpoint", "cut.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pipeline_pretrain_snl_retention() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "pretrain", "--arch", "mlp:2,8,2", "--dataset", "two-gaussians", "--n", "120",
            "--epochs", "5", "--batch-size", "16", "--out", "pre.ckpt", "--report", "pre.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(dir.path().join("pre.csv")).unwrap();
    assert!(trace.starts_with("# train-report-v1\n"));

    let out = run(
        &[
            "snl", "--checkpoint", "pre.ckpt", "--dataset", "two-gaussians", "--n", "120",
            "--budget", "4", "--adam-lr", "0.01", "--max-joint-epochs", "200",
            "--finetune-epochs", "2", "--batch-size", "16", "--out", "snl.ckpt",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("status=BudgetReached"));

    let out = run(&["report", "retention", "--checkpoint", "snl.ckpt"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("# retention-v1\n"));
}

#[test]
fn config_file_supplies_flags_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "arch = mlp:2,6,2\ndataset = two-gaussians\nn = 80\nepochs = 3\nbatch-size = 16\n",
    )
    .unwrap();
    let out = run(&["--config", "run.cfg", "pretrain", "--out", "a.ckpt"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // A flag overrides the file value (a bad file value would otherwise fail).
    std::fs::write(dir.path().join("bad.cfg"), "arch = nonsense\ndataset = two-gaussians\n")
        .unwrap();
    let out = run(
        &["--config", "bad.cfg", "pretrain", "--arch", "mlp:2,6,2", "--n", "80", "--epochs", "2",
          "--out", "b.ckpt"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn capacity_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["capacity", "optimal", "--d1", "50000", "--d2", "5000", "--budget", "10000"],
        dir.path(),
    );
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("alpha1=0.14999") && text.contains("alpha2=0.5001"), "{text}");

    let out = run(
        &["capacity", "verify", "--trials", "40", "--d-max", "5", "--seed", "3", "--out",
          "cap.csv"],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("cap.csv")).unwrap();
    assert!(csv.starts_with("# capacity-verify-v1\n"));
}

#[test]
fn sweep_outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "sweep", "--arch", "mlp:2,8,2", "--dataset", "two-gaussians", "--n", "100",
        "--seeds", "1,2", "--budgets", "4,8", "--variants", "snl,prune-baseline",
        "--pretrain-epochs", "3", "--adam-lr", "0.01", "--max-joint-epochs", "30",
        "--finetune-epochs", "1", "--batch-size", "16",
    ];
    let mut a1 = args.to_vec();
    a1.extend(["--out-dir", "run1"]);
    let mut a2 = args.to_vec();
    a2.extend(["--out-dir", "run2"]);
    assert!(run(&a1, dir.path()).status.success());
    assert!(run(&a2, dir.path()).status.success());
    let p1 = std::fs::read(dir.path().join("run1/pareto.csv")).unwrap();
    let p2 = std::fs::read(dir.path().join("run2/pareto.csv")).unwrap();
    assert_eq!(p1, p2);
}
