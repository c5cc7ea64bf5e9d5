//! End-to-end runs of the `semux` binary.

use std::path::Path;
use std::process::{Command, Output};

fn semux(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semux")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_conf(dir: &Path, body: &str) -> String {
    let p = dir.join("run.conf");
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

const QUICK: &str = "fft_size = 64\nused_subcarriers = 16\nepochs = 1\nsteps_per_epoch = 3\n\
eval_items = 16\neval_realizations = 1\nsynthetic_train = 64\nsynthetic_test = 32\n";

#[test]
fn selftest_succeeds() {
    let out = semux(&["selftest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn bad_input_exits_nonzero() {
    let d = tempfile::tempdir().unwrap();
    let out = semux(&["fly"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fly"));

    let conf = write_conf(d.path(), "fft_size = 64\nbogus = 1\n");
    let out = semux(&["train", "--config", &conf]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let out = semux(&["train"]);
    assert!(!out.status.success());
}

#[test]
fn train_eval_with_overrides() {
    let d = tempfile::tempdir().unwrap();
    let conf = write_conf(d.path(), QUICK);
    let out_dir = d.path().join("o");
    let o = out_dir.display().to_string();
    let out = semux(&["train", "--config", &conf, "--seed", "9", "--out", &o]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("train.csv").exists());
    assert!(out_dir.join("checkpoint.bin").exists());

    let out = semux(&["eval", "--config", &conf, "--seed", "10", "--out", &o]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    let out = semux(&["eval", "--config", &conf, "--seed", "10", "--out", &o, "--force"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = semux(&["eval", "--config", &conf, "--seed", "9", "--out", &o]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(out_dir.join("eval.csv")).unwrap().lines().count(), 3);
}
