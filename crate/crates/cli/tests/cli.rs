use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scribbleseg::checkpoint;
use scribbleseg::data::io::read_dataset;
use scribbleseg::metrics::evaluate_model;
use scribbleseg::{split_folds, EvalResult};

const TINY_CONFIG: &str = r#"
[backbone]
encoder_depth = 2
init_channels = 2
max_channels = 4
hidden_dim = 4

[train]
batch_size = 4
num_epochs = 2
seed = 3
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scribbleseg"));
    c.env_remove("SCRIBBLESEG_OUTPUT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn scribbleseg")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every regular file under `dir` with its bytes, keyed by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["gen-synthetic", "--patients", "5", "--images", "2", "--size", "32", "--seed", "1", "--out", s(&data)]);
    data
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY_CONFIG).unwrap();
    p
}

#[test]
fn gen_synthetic_writes_dataset_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let (m, samples) = read_dataset(&data).unwrap();
    assert_eq!(m.num_classes, 3);
    assert_eq!(samples.len(), 10);
    assert!(data.join("generation.json").exists());
    let again = dir.path().join("again");
    ok(&["gen-synthetic", "--patients", "5", "--images", "2", "--size", "32", "--seed", "1", "--out", s(&again)]);
    assert_eq!(snapshot(&data), snapshot(&again));
}

#[test]
fn prune_ratio_one_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let before = snapshot(&data);
    let out = dir.path().join("pruned");
    ok(&["prune-scribbles", "--data", s(&data), "--ratio", "1.0", "--seed", "4", "--out", s(&out)]);
    assert_eq!(snapshot(&data), before, "input dataset modified");
    let pruned: Vec<_> = snapshot(&out).into_iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).collect();
    let orig: Vec<_> = before.into_iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).collect();
    assert_eq!(pruned, orig);
}

#[test]
fn prune_keeps_fewer_pixels_and_leaves_input_alone() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let before = snapshot(&data);
    let out = dir.path().join("pruned");
    ok(&["prune-scribbles", "--data", s(&data), "--ratio", "0.25", "--out", s(&out)]);
    assert_eq!(snapshot(&data), before);
    let (_, a) = read_dataset(&data).unwrap();
    let (_, b) = read_dataset(&out).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(y.scribble.labeled_count() <= x.scribble.labeled_count());
        assert_eq!(x.image, y.image);
        assert_eq!(x.gt_mask, y.gt_mask);
    }
}

#[test]
fn synth_scribbles_relabels_from_masks() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let before = snapshot(&data);
    let out = dir.path().join("synth");
    ok(&["synth-scribbles", "--data", s(&data), "--seed", "9", "--out", s(&out)]);
    assert_eq!(snapshot(&data), before);
    let (_, b) = read_dataset(&out).unwrap();
    for x in &b {
        let gt = x.gt_mask.as_ref().unwrap();
        for (i, &l) in x.scribble.as_slice().iter().enumerate() {
            assert!(l == scribbleseg::UNLABELED || l == gt.as_slice()[i]);
        }
        assert!(x.scribble.labeled_count() > 0);
    }
}

#[test]
fn bad_ratio_and_bad_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let out = run(&["prune-scribbles", "--data", s(&data), "--ratio", "1.5", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nbatch_sise = 3\n").unwrap();
    let out = run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_sise"));

    let good = tiny_config(dir.path());
    let out = run(&["train", "--config", s(&good), "--data", s(&data), "--variant", "nope", "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));

    // Unparseable flags are usage errors as well.
    assert_eq!(run(&["train", "--epochs", "x"]).status.code(), Some(2));
}

#[test]
fn output_inside_input_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let before = snapshot(&data);
    let out = run(&["prune-scribbles", "--data", s(&data), "--ratio", "0.5", "--out", s(&data.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(snapshot(&data), before);
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["prune-scribbles", "--data", s(&dir.path().join("none")), "--ratio", "0.5", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .env("SCRIBBLESEG_OUTPUT", dir.path())
        .args(["gen-synthetic", "--patients", "5", "--images", "1", "--size", "32"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("synthetic").join("dataset.json").exists());
}

#[test]
fn train_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let before = snapshot(&data);
    let cfg = tiny_config(dir.path());
    let run_dir = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--variant", "baseline_pce", "--epochs", "1", "--out", s(&run_dir)]);
    assert_eq!(snapshot(&data), before, "input dataset modified");

    // One epoch row per fold.
    for f in 0..5 {
        let log = fs::read_to_string(run_dir.join(format!("fold{f}/metrics.csv"))).unwrap();
        assert_eq!(log.lines().count(), 2, "fold {f}: {log}");
        assert!(run_dir.join(format!("fold{f}/last.ckpt")).exists());
    }

    // Flags override the file in the snapshot.
    let resolved = scribbleseg::RunConfigFile::load(&run_dir.join("config.toml")).unwrap();
    assert_eq!(resolved.train.num_epochs, 1);
    assert_eq!(resolved.train.variant, scribbleseg::Variant::BaselinePce);
    assert_eq!(resolved.train.seed, 3);
    assert_eq!(resolved.backbone.init_channels, 2);

    // eval reproduces evaluate_model on the same checkpoint and fold.
    let ck = run_dir.join("fold0/last.ckpt");
    let eval_dir = dir.path().join("eval");
    ok(&["eval", "--checkpoint", s(&ck), "--fold", "0", "--out", s(&eval_dir)]);
    let loaded = checkpoint::load(&ck).unwrap();
    let (_, samples) = read_dataset(&data).unwrap();
    let ids = scribbleseg::data::patient_ids(&samples);
    let folds = split_folds(&ids, 5, 3).unwrap();
    let mut model = loaded.state.model;
    let expected = evaluate_model(&mut model, &samples, folds.held_out(0).unwrap(), 0).unwrap();
    let csv = fs::read_to_string(eval_dir.join("eval_fold0.csv")).unwrap();
    assert_eq!(csv, expected.to_csv());
    assert_eq!(csv, fs::read_to_string(run_dir.join("fold0/eval.csv")).unwrap());

    ok(&["report", "--run", s(&run_dir)]);
    let merged: EvalResult = serde_json::from_str(&fs::read_to_string(run_dir.join("report_cases.json")).unwrap()).unwrap();
    assert_eq!(merged.cases.len(), 5 * 2);
    let table = fs::read_to_string(run_dir.join("report.txt")).unwrap();
    assert!(table.contains("disk") && table.contains("ring") && table.contains("Avg"), "{table}");

    // The snapshot alone re-runs to identical outputs.
    let rerun = dir.path().join("rerun");
    ok(&["train", "--config", s(&run_dir.join("config.toml")), "--out", s(&rerun)]);
    for f in 0..5 {
        for name in ["metrics.csv", "steps.csv", "eval.csv", "last.ckpt"] {
            let a = fs::read(run_dir.join(format!("fold{f}/{name}"))).unwrap();
            let b = fs::read(rerun.join(format!("fold{f}/{name}"))).unwrap();
            assert!(a == b, "fold{f}/{name} differs on re-run");
        }
    }
}

#[test]
fn single_fold_and_fold_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let cfg = tiny_config(dir.path());
    let run_dir = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--variant", "full", "--epochs", "1", "--delta", "0.5", "--fold", "2", "--out", s(&run_dir)]);
    assert!(run_dir.join("fold2/metrics.csv").exists());
    assert!(!run_dir.join("fold0").exists());
    let resolved = scribbleseg::RunConfigFile::load(&run_dir.join("config.toml")).unwrap();
    assert_eq!(resolved.augment.further.strength, 0.5);

    let out = run(&["train", "--config", s(&cfg), "--data", s(&data), "--fold", "7", "--out", s(&dir.path().join("r2"))]);
    assert_eq!(out.status.code(), Some(2));
}
