use std::path::Path;
use std::process::{Command, Output};

use lct::cli::{cmd_gradcheck, EXIT_GRADCHECK};
use lct::gradcheck::{Faults, Scope};

fn lct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lct"))
        .args(args)
        .env("LCT_THREADS", "1")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_cfg(dir: &Path, body: &str) -> String {
    let p = dir.join("run.cfg");
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

#[test]
fn count_succeeds_and_writes_csv_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("counts");
    let o = lct(&[
        "count",
        "--preset",
        "resnet101",
        "--attention",
        "se",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("costs.csv")).unwrap();
    assert!(csv.lines().count() > 100);
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&lct(&["count", "--attention", "bogus"])), 2);
    assert_eq!(code(&lct(&["count", "--init", "w2_b2"])), 2);
    let cfg = write_cfg(dir.path(), "preset = resnet-mini\nnot_a_key = 1\n");
    let o = lct(&["count", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not_a_key"));
    let o = Command::new(env!("CARGO_BIN_EXE_lct"))
        .args(["count"])
        .env("LCT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert_eq!(code(&lct(&["eval", "--preset", "resnet-mini"])), 2);
}

#[test]
fn missing_or_corrupt_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = lct(&[
        "train",
        "--data",
        "/definitely/missing",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/definitely/missing"));
    let bad = dir.path().join("data_batch_1.bin");
    std::fs::write(&bad, vec![1u8; 5000]).unwrap();
    let o = lct(&[
        "train",
        "--data",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn divergence_exits_4_and_keeps_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = write_cfg(
        dir.path(),
        "preset = resnet-mini\ntrain.epochs = 2\ntrain.lr0 = 1000\ndata.synth_n = 64\ndata.val_n = 0\n",
    );
    let o = lct(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("train_log.csv").exists());
}

#[test]
fn gradcheck_failure_exits_5_naming_unit() {
    let mut sink = Vec::new();
    let err = cmd_gradcheck(
        Scope::Layers,
        Faults {
            corrupt_sigmoid_backward: true,
        },
        &mut sink,
    )
    .unwrap_err();
    assert_eq!(err.code, EXIT_GRADCHECK);
    assert!(err.message.contains("sigmoid"), "{}", err.message);
}

#[test]
fn train_resume_eval_and_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out_s = out.to_str().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "preset = resnet-mini\nattention.kind = lct\ntrain.epochs = 2\ndata.synth_n = 40\ndata.val_n = 20\n",
    );
    let o = lct(&["train", "--config", &cfg, "--out", out_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let ckpt = out.join("final.ckpt");
    let o = lct(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("top1"));

    // a wrong architecture is a configuration error naming the tensor
    let o = lct(&[
        "eval",
        "--config",
        &cfg,
        "--attention",
        "se",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage1.block1"));

    let an = dir.path().join("an");
    let o = lct(&[
        "analyze",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--scope",
        "stage2.block1",
        "--out",
        an.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(an.join("stage2_block1_lct.csv").exists());
    assert!(an.join("summary.csv").exists());

    let o = lct(&["analyze", "--preset", "resnet-mini", "--attention", "none"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("no attention blocks"));
}
