use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spikebert::teacher_io::{read_dump, DumpKind};

const CONFIG: &str = "depth = 2\nhidden_dim = 16\nheads = 2\ntime_steps = 2\nmax_len = 16\n\
teacher_layers = 4\nteacher_dim = 12\nlr = 5e-3\nbatch_size = 8\nsteps = 50\n";

fn spikebert(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikebert"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("SPIKEBERT_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = spikebert(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Small dataset, config and both dump flavours in a fresh directory.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    std::fs::write(dir.join("cfg.toml"), CONFIG).unwrap();
    ok(&dir, &["gen-data", "--train", "64", "--test", "32", "--seed", "3"]);
    for stage in ["1", "2"] {
        let out = format!("t{stage}.sbtd");
        ok(
            &dir,
            &["gen-teacher", "--stage", stage, "--data", "train.tsv", "--vocab", "vocab.txt", "--config", "cfg.toml", "--out", &out],
        );
    }
    (tmp, dir)
}

#[test]
fn gen_teacher_is_deterministic_and_flavoured_by_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-data", "--train", "40", "--test", "10"]);
    for out in ["a.sbtd", "b.sbtd"] {
        ok(dir, &["gen-teacher", "--stage", "2", "--data", "train.tsv", "--out", out, "--seed", "7"]);
    }
    let a = std::fs::read(dir.join("a.sbtd")).unwrap();
    assert_eq!(a, std::fs::read(dir.join("b.sbtd")).unwrap());
    assert!(dir.join("a.sbtd.vocab").is_file());

    ok(dir, &["gen-teacher", "--stage", "1", "--data", "train.tsv", "--out", "f.sbtd", "--seed", "7"]);
    let f = read_dump(&dir.join("f.sbtd")).unwrap();
    assert_eq!(f.header.kind, DumpKind::Features);
    assert!(f.records.iter().all(|r| r.logits.is_none() && r.label.is_none()));
    let t = read_dump(&dir.join("a.sbtd")).unwrap();
    assert_eq!(t.header.kind, DumpKind::Task);
    assert!(t.records.iter().all(|r| r.logits.is_some()));
}

#[test]
fn missing_inputs_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = spikebert(dir, &["gen-teacher", "--stage", "1", "--data", "nope.tsv"]);
    assert_eq!(code(&out), 2);
    let out = spikebert(dir, &["eval", "--checkpoint", "x", "--data", "y", "--vocab", "z"]);
    assert_eq!(code(&out), 2);
    let out = spikebert(dir, &["train-stage1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bad_config_is_a_usage_error() {
    let (_tmp, dir) = workspace();
    std::fs::write(dir.join("bad.toml"), "no_such_key = 1\n").unwrap();
    let out = spikebert(&dir, &["train-stage1", "--dump", "t1.sbtd", "--vocab", "vocab.txt", "--config", "bad.toml"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn corrupt_dump_is_a_runtime_error() {
    let (_tmp, dir) = workspace();
    let bytes = std::fs::read(dir.join("t1.sbtd")).unwrap();
    std::fs::write(dir.join("cut.sbtd"), &bytes[..bytes.len() - 3]).unwrap();
    let out = spikebert(&dir, &["train-stage1", "--dump", "cut.sbtd", "--vocab", "vocab.txt", "--config", "cfg.toml"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let (_tmp, dir) = workspace();
    let mut words = std::fs::read_to_string(dir.join("vocab.txt")).unwrap();
    words.push_str("extra\n");
    std::fs::write(dir.join("other.txt"), words).unwrap();
    let out = spikebert(&dir, &["train-stage1", "--dump", "t1.sbtd", "--vocab", "other.txt", "--config", "cfg.toml"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab"));
}

#[test]
fn smoke_pipeline_writes_logs_checkpoints_and_reports() {
    let (_tmp, dir) = workspace();
    ok(&dir, &["train-stage1", "--dump", "t1.sbtd", "--vocab", "vocab.txt", "--config", "cfg.toml", "--out", "s1.ckpt", "--log", "s1.tsv"]);
    let log = std::fs::read_to_string(dir.join("s1.tsv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step\ttotal\tfeature\tembedding\tlogits\tce"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 50);
    assert!(rows[49].starts_with("50\t"));

    let out = spikebert(&dir, &["train-stage2", "--dump", "t2.sbtd", "--vocab", "vocab.txt", "--config", "cfg.toml"]);
    assert_eq!(code(&out), 2);

    ok(&dir, &["train-stage2", "--dump", "t2.sbtd", "--vocab", "vocab.txt", "--config", "cfg.toml", "--init", "s1.ckpt", "--out", "s2.ckpt", "--steps", "5"]);
    assert_eq!(std::fs::read_to_string(dir.join("s2.ckpt.loss.tsv")).unwrap().lines().count(), 6);
    ok(&dir, &["train-stage2", "--dump", "t2.sbtd", "--vocab", "vocab.txt", "--config", "cfg.toml", "--from-scratch", "--out", "scratch.ckpt", "--steps", "2"]);

    let eval = ok(&dir, &["eval", "--checkpoint", "s2.ckpt", "--data", "test.tsv", "--vocab", "vocab.txt"]);
    let text = String::from_utf8(eval.stdout).unwrap();
    assert!(text.starts_with("accuracy "), "{text}");
    assert!(text.contains("/32)"));

    ok(&dir, &["energy", "--checkpoint", "s2.ckpt", "--data", "test.tsv", "--vocab", "vocab.txt", "--out-dir", "rep"]);
    let kv = std::fs::read_to_string(dir.join("rep/energy.kv")).unwrap();
    assert!(kv.lines().any(|l| l.starts_with("total_mj")), "{kv}");
    assert!(dir.join("rep/energy.txt").is_file());
}

#[test]
fn eval_rejects_labels_beyond_the_model() {
    let (_tmp, dir) = workspace();
    ok(&dir, &["train-stage1", "--dump", "t1.sbtd", "--vocab", "vocab.txt", "--config", "cfg.toml", "--out", "s1.ckpt", "--steps", "1"]);
    std::fs::write(dir.join("three.tsv"), "w0 w1\t2\n").unwrap();
    let out = spikebert(&dir, &["eval", "--checkpoint", "s1.ckpt", "--data", "three.tsv", "--vocab", "vocab.txt"]);
    assert_eq!(code(&out), 1);
    std::fs::write(dir.join("empty.tsv"), "").unwrap();
    let out = spikebert(&dir, &["eval", "--checkpoint", "s1.ckpt", "--data", "empty.tsv", "--vocab", "vocab.txt"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn output_directory_comes_from_the_environment() {
    let (_tmp, dir) = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_spikebert"))
        .current_dir(&dir)
        .env("SPIKEBERT_OUT_DIR", dir.join("runs"))
        .env("RUST_LOG", "warn")
        .args(["train-stage1", "--dump", "t1.sbtd", "--vocab", "vocab.txt", "--config", "cfg.toml", "--steps", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.join("runs/stage1.ckpt").is_file());
    assert!(dir.join("runs/stage1.ckpt.loss.tsv").is_file());
}
