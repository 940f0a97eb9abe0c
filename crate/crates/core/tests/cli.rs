//! Contracts of the `poolprobe` binary.

use std::path::Path;
use std::process::{Command, Output};

use poolprobe::heads::{HeadHyper, HeadKind, HeadState};
use poolprobe::numerics::RngStream;
use poolprobe::trainer::{evaluate, Dataset, Metric};

fn poolprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poolprobe")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = poolprobe(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, dim: &str) {
    ok(&[
        "synth", "--out-dir", dir.to_str().unwrap(), "--classes", "4", "--dim", dim, "--s-t", "4", "--s-f", "2",
        "--clips", "60", "--test-clips", "20", "--seed", "1",
    ]);
}

#[test]
fn zero_lr_training_leaves_the_initialisation_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (stores, runs) = (dir.path().join("s"), dir.path().join("r"));
    synth(&stores, "8");
    let train = stores.join("train.pemb");
    let test = stores.join("test.pemb");
    ok(&[
        "train", "--train", train.to_str().unwrap(), "--head", "proto", "--prototypes-per-class", "2", "--lr", "0",
        "--wd", "0", "--seed", "5", "--epochs", "2", "--out-dir", runs.to_str().unwrap(),
    ]);
    let ckpt = runs.join("proto.ckpt");
    assert!(runs.join("proto.log.csv").exists());
    let printed = ok(&["eval", "--store", test.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    let value: f64 = printed.trim().strip_prefix("mAP ").unwrap().parse().unwrap();

    let data = Dataset::load(&test).unwrap();
    let hyper = HeadHyper {
        prototypes_per_class: 2,
        ..HeadHyper::default()
    };
    let fresh = HeadState::init(HeadKind::Proto, data.dims, hyper, &mut RngStream::new(5, 0)).unwrap();
    assert_eq!(value, evaluate(&fresh, &data, Metric::Map).unwrap().value);
}

#[test]
fn unknown_head_lists_the_valid_kinds() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "8");
    let train = dir.path().join("train.pemb");
    let out = poolprobe(&["train", "--train", train.to_str().unwrap(), "--head", "attention", "--lr", "1e-3", "--wd", "0"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for kind in HeadKind::ALL {
        assert!(err.contains(kind.name()), "{err}");
    }
}

#[test]
fn checkpoint_and_store_dimensions_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (small, big, runs) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("r"));
    synth(&small, "8");
    synth(&big, "16");
    ok(&[
        "train", "--train", small.join("train.pemb").to_str().unwrap(), "--head", "linear", "--lr", "1e-3", "--wd",
        "0", "--epochs", "1", "--out-dir", runs.to_str().unwrap(),
    ]);
    let out = poolprobe(&[
        "eval", "--store", big.join("test.pemb").to_str().unwrap(), "--checkpoint",
        runs.join("linear.ckpt").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dims"));
}

#[test]
fn environment_overrides_output_directories() {
    let dir = tempfile::tempdir().unwrap();
    let stores = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_poolprobe"))
        .args(["synth", "--classes", "4", "--dim", "8", "--s-t", "2", "--s-f", "2", "--clips", "10", "--test-clips", "5"])
        .env("POOLPROBE_STORE_DIR", &stores)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stores.join("train.pemb").exists() && stores.join("test.pemb").exists());

    let runs = dir.path().join("runs-env");
    let out = Command::new(env!("CARGO_BIN_EXE_poolprobe"))
        .args(["train", "--train", stores.join("train.pemb").to_str().unwrap(), "--head", "linear"])
        .args(["--lr", "1e-3", "--wd", "0", "--epochs", "1"])
        .env("POOLPROBE_OUT_DIR", &runs)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(runs.join("linear.ckpt").exists());
}

#[test]
fn report_renders_tables_and_win_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let cells = [("proto", 0.9, 0.01), ("linear", 0.5, 0.02)];
    let mut files = Vec::new();
    for (method, mean, sd) in cells {
        let path = dir.path().join(format!("{method}.csv"));
        std::fs::write(
            &path,
            format!("dataset,backbone,method,mean,sd,seeds,metric\nsynthetic,toy,{method},{mean},{sd},5,mAP\n"),
        )
        .unwrap();
        files.push(path.to_str().unwrap().to_string());
    }
    let mut args: Vec<&str> = vec!["report"];
    args.extend(files.iter().map(String::as_str));
    let table = ok(&args);
    assert!(table.contains("**0.9000 ± 0.0100**"), "{table}");
    args.push("--win-matrix");
    let matrix = ok(&args);
    assert!(matrix.contains("proto") && matrix.contains("linear"), "{matrix}");
    args.extend(["--rule", "nearest"]);
    assert!(!poolprobe(&args).status.success());
}
