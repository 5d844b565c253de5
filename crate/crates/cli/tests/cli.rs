use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use iterflow_core::summary::load_dataset;

fn iterflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iterflow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
seed = 3
[problem]
kind = "linear"
[flow]
blocks = 2
hidden = [8]
[train]
n_train = 60
stages = 2
max_epochs = 5
patience = 50
n_s_train = 4
n_s_infer = 4
[eval]
n_test = 2
n_samples = 20
sweep_sizes = [30]
"#;

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn zero_training_size_is_rejected_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[train]\nn_train = 0\n");
    let out = tmp.path().join("out");
    let o = iterflow(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("n_train"));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_and_missing_file_are_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[flow]\nlayers = 3\n");
    assert_eq!(iterflow(&["train", "--config", &cfg]).status.code(), Some(1));
    let missing = tmp.path().join("nope.toml");
    assert_eq!(iterflow(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let o = iterflow(&["generate", "--config", &cfg, "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn linear_generate_writes_replication_sized_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[problem]\nkind = \"linear\"\n[train]\nn_train = 1000\n");
    let o = iterflow(&["generate", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ds = load_dataset(&fs::read(tmp.path().join("dataset_stage0.bin")).unwrap()).unwrap();
    assert_eq!((ds.len(), ds.x_dim(), ds.y_dim()), (1000, 16, 64));
    assert_eq!(ds.stage(), 0);
}

#[test]
fn train_infer_evaluate_round() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();
    for cmd in ["generate", "train"] {
        let o = iterflow(&[cmd, "--config", &cfg, "--out", out_s]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }

    // one loss row per epoch per stage; patience exceeds max_epochs
    let loss = fs::read_to_string(out.join("train_loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash: "));
    assert_eq!(lines.next().unwrap(), "stage,epoch,train_loss,val_loss,skipped_steps");
    let rows: Vec<(usize, usize)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect();
    let expected: Vec<(usize, usize)> = (0..3).flat_map(|s| (0..5).map(move |e| (s, e))).collect();
    assert_eq!(rows, expected);

    let bundle = out.join("bundle");
    let bundle_s = bundle.to_str().unwrap();
    let dataset = out.join("dataset_stage0.bin");
    let o = iterflow(&[
        "infer", "--config", &cfg, "--out", out_s, "--bundle", bundle_s,
        "--dataset", dataset.to_str().unwrap(), "--record", "1", "--samples", "25",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let samples = fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 2 + 25);

    // observation of the wrong length
    let y = tmp.path().join("y.txt");
    fs::write(&y, "1.0, 2.0, 3.0\n").unwrap();
    let o = iterflow(&["infer", "--config", &cfg, "--out", out_s, "--bundle", bundle_s, "--y", y.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("y_dim"));

    let o = iterflow(&["evaluate", "--config", &cfg, "--out", out_s, "--bundle", bundle_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("metrics_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2 + 3);

    // a toy config cannot evaluate a linear bundle
    let toy = write_config(tmp.path(), "[problem]\nkind = \"toy\"\n[eval]\nn_test = 2\n");
    let o = iterflow(&["evaluate", "--config", &toy, "--out", out_s, "--bundle", bundle_s]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("x_dim"));
}

#[test]
fn csv_outputs_carry_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("sweep");
    let o = iterflow(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let first = text.lines().next().unwrap();
    let hash = first.strip_prefix("# config_hash: ").unwrap();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
}
