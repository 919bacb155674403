use std::fs;
use std::path::{Path, PathBuf};

use assert_cmd::Command;
use serde_json::Value;

const TINY_CONFIG: &str = r#"
[model]
channels = [4, 8, 12, 16]
convnext_depths = [1, 1, 1, 1]
swin_depths = [1, 1, 1, 1]
heads = [1, 1, 2, 2]
head_widths = [8]

[train]
lr = 0.001
epochs = 1
batch_size = 4
"#;

fn sarcscore() -> Command {
    let mut cmd = Command::cargo_bin("sarcscore").unwrap();
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_of(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Synthetic dataset of `n` cells at 96×96 under `dir/synth`.
fn synth(dir: &Path, n: usize, noise: f64) -> PathBuf {
    let out = dir.join("synth");
    sarcscore()
        .args(["synth", "--n", &n.to_string(), "--size", "96", "--expert-noise", &noise.to_string()])
        .arg("--out")
        .arg(&out)
        .assert()
        .success();
    out.join("dataset").join("manifest.csv")
}

fn count_with_suffix(dir: &Path, suffix: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
        .count()
}

#[test]
fn synth_writes_dataset_snapshot_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    sarcscore()
        .args(["--seed", "5", "synth", "--n", "6", "--size", "96", "--patches-per-class", "2"])
        .arg("--out")
        .arg(&out)
        .assert()
        .success();
    let manifest = fs::read_to_string(out.join("dataset/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 7);
    assert_eq!(fs::read_to_string(out.join("patches/patches.csv")).unwrap().lines().count(), 11);
    let snapshot = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(snapshot.contains("[synth]") && snapshot.contains("seed = 5"));
    let run = read_json(&out.join("run_manifest.json"));
    assert_eq!(run["command"], "synth");
    let files = run["files"].as_array().unwrap();
    assert!(files.iter().any(|f| f["path"] == "dataset/manifest.csv"));
    assert!(files.iter().all(|f| f["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn prepare_requires_a_maturity_choice() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 3, 0.0);
    let out = sarcscore().args(["prepare", "--manifest"]).arg(&manifest).arg("--out").arg(dir.path().join("p")).output().unwrap();
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert!(err.starts_with("error[config]:"), "{err}");
    assert!(err.contains("--patchnet") && err.contains("--no-maturity"));
    assert_eq!(err.trim_end().lines().count(), 1);

    let missing = sarcscore()
        .args(["prepare", "--patchnet", "nope.ckpt", "--manifest"])
        .arg(&manifest)
        .arg("--out")
        .arg(dir.path().join("p"))
        .output()
        .unwrap();
    assert!(stderr_of(&missing).contains("train-patchnet"));
}

#[test]
fn prepare_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 3, 0.0);
    let out = dir.path().join("prep");
    let run = || {
        sarcscore().args(["prepare", "--no-maturity", "--manifest"]).arg(&manifest).arg("--out").arg(&out).assert().success();
    };
    run();
    let stacks = out.join("stacks");
    assert_eq!(count_with_suffix(&stacks, ".stack.tiff"), 3);
    assert_eq!(count_with_suffix(&stacks, ".stack.json"), 3);
    let sidecar = read_json(&stacks.join("cell_00000.stack.json"));
    assert_eq!(sidecar["window"], 96);
    assert_eq!(sidecar["step"], 8);
    assert_eq!(sidecar["options"]["exclude_dc"], false);
    assert_eq!(sidecar["interpolation"]["maturity_map"], "nearest");
    let before = fs::metadata(stacks.join("cell_00000.stack.tiff")).unwrap().modified().unwrap();

    run();
    let summary = read_json(&out.join("prepare_summary.json"));
    assert_eq!((summary["written"].as_u64(), summary["skipped"].as_u64()), (Some(0), Some(3)));
    let after = fs::metadata(stacks.join("cell_00000.stack.tiff")).unwrap().modified().unwrap();
    assert_eq!(before, after);
}

#[test]
fn corrupted_image_is_named_and_others_still_prepared() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 3, 0.0);
    let bad = manifest.parent().unwrap().join("images/cell_00001.png");
    fs::write(&bad, b"not a png").unwrap();
    let out = dir.path().join("prep");
    let result = sarcscore().args(["prepare", "--no-maturity", "--manifest"]).arg(&manifest).arg("--out").arg(&out).output().unwrap();
    assert!(!result.status.success());
    let err = stderr_of(&result);
    let last = err.trim_end().lines().last().unwrap();
    assert!(last.starts_with("error[image]:") && last.contains("cell_00001.png"), "{err}");
    assert_eq!(count_with_suffix(&out.join("stacks"), ".stack.tiff"), 2);
}

#[test]
fn evaluate_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("pred.csv");
    fs::write(&csv, "id,label,prediction\na,1.0,1.0\nb,2.5,2.5\nc,3.0,3.0\nd,4.5,4.5\ne,5.0,5.0\n").unwrap();
    let out = dir.path().join("eval");
    sarcscore().args(["evaluate", "--plots", "--predictions"]).arg(&csv).arg("--out").arg(&out).assert().success();
    let report = read_json(&out.join("eval_report.json"));
    assert_eq!(report["spearman"], 1.0);
    assert_eq!(report["mae"], 0.0);
    assert_eq!(report["mse"], 0.0);
    assert_eq!(report["r2"], 1.0);
    assert!(fs::read_to_string(out.join("scatter.svg")).unwrap().starts_with("<svg"));
    assert!(out.join("label_histogram.svg").is_file());
}

#[test]
fn unknown_ablation_variant_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = sarcscore()
        .args(["ablate", "--no-maturity", "--manifest", "unused.csv", "--variants", "full,bogus"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert!(err.starts_with("error[config]:"), "{err}");
    assert!(err.contains("bogus") && err.contains("convnext_only") && err.contains("no_postprocessing"));
}

#[test]
fn usage_errors_are_one_line() {
    let out = sarcscore().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.starts_with("error[usage]:"));
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn train_predict_ablate_and_plot_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let manifest = synth(dir.path(), 30, 0.0);

    let train = dir.path().join("train");
    sarcscore()
        .arg("--config")
        .arg(&cfg)
        .args(["train", "--no-maturity", "--manifest"])
        .arg(&manifest)
        .arg("--out")
        .arg(&train)
        .assert()
        .success();
    for f in ["model.ckpt", "history.json", "split.json", "test_report.json", "config.toml", "run_manifest.json"] {
        assert!(train.join(f).is_file(), "missing {f}");
    }
    let report = read_json(&train.join("test_report.json"));
    assert!(report["n"].as_u64().unwrap() > 0);

    // The snapshot alone reproduces the run.
    let again = dir.path().join("again");
    sarcscore()
        .arg("--config")
        .arg(train.join("config.toml"))
        .args(["train", "--no-maturity", "--manifest"])
        .arg(&manifest)
        .arg("--out")
        .arg(&again)
        .assert()
        .success();
    assert_eq!(fs::read(train.join("model.ckpt")).unwrap(), fs::read(again.join("model.ckpt")).unwrap());

    let image = manifest.parent().unwrap().join("images/cell_00000.png");
    let predict = sarcscore()
        .args(["predict", "--no-maturity", "--checkpoint"])
        .arg(train.join("model.ckpt"))
        .arg(&image)
        .arg("--out")
        .arg(dir.path().join("pred"))
        .output()
        .unwrap();
    assert!(predict.status.success(), "{}", stderr_of(&predict));
    let json: Value = serde_json::from_slice(&predict.stdout).unwrap();
    assert_eq!(json["id"], "cell_00000");
    let clamped = json["clamped_score"].as_f64().unwrap();
    assert!((1.0..=5.0).contains(&clamped));
    assert!(json["raw_score"].is_number());

    let eval = dir.path().join("eval");
    sarcscore()
        .args(["evaluate", "--no-maturity", "--checkpoint"])
        .arg(train.join("model.ckpt"))
        .arg("--manifest")
        .arg(&manifest)
        .arg("--split-file")
        .arg(train.join("split.json"))
        .arg("--out")
        .arg(&eval)
        .assert()
        .success();
    let split = read_json(&train.join("split.json"));
    let eval_report = read_json(&eval.join("eval_report.json"));
    assert_eq!(eval_report["n"].as_u64().unwrap() as usize, split["test"].as_array().unwrap().len());
    assert_eq!(eval_report["spearman"], report["spearman"]);

    let ablate = dir.path().join("ablate");
    sarcscore()
        .arg("--config")
        .arg(&cfg)
        .args(["ablate", "--no-maturity", "--manifest"])
        .arg(&manifest)
        .arg("--out")
        .arg(&ablate)
        .assert()
        .success();
    let csv = fs::read_to_string(ablate.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("variant,spearman,mae,mse,r2"));
    let rows = read_json(&ablate.join("ablation.json"));
    assert_eq!(rows.as_array().unwrap().len(), 6);

    let plots = dir.path().join("plots");
    sarcscore()
        .args(["plot", "--history"])
        .arg(train.join("history.json"))
        .arg("--report")
        .arg(train.join("test_report.json"))
        .arg("--ablation")
        .arg(ablate.join("ablation.json"))
        .arg("--out")
        .arg(&plots)
        .assert()
        .success();
    for f in ["training_curves.svg", "scatter.svg", "label_histogram.svg", "ablation.svg"] {
        assert!(fs::read_to_string(plots.join(f)).unwrap().contains("<svg"), "{f}");
    }
}

#[test]
fn patchnet_train_infer_and_prepare_with_maturity() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 2, 0.0);
    let pn = dir.path().join("pn");
    sarcscore()
        .args(["train-patchnet", "--synthetic-per-class", "2", "--epochs", "1"])
        .arg("--out")
        .arg(&pn)
        .assert()
        .success();
    let ckpt = pn.join("patchnet.ckpt");
    assert!(ckpt.is_file() && pn.join("history.json").is_file());

    let maps = dir.path().join("maps");
    sarcscore()
        .args(["infer-patchnet", "--checkpoint"])
        .arg(&ckpt)
        .arg("--manifest")
        .arg(&manifest)
        .arg("--out")
        .arg(&maps)
        .assert()
        .success();
    let png = image::open(maps.join("maturity/cell_00000.maturity.png")).unwrap().into_luma8();
    // A 96×96 image yields a single window on the stride-8 grid.
    assert_eq!(png.dimensions(), (1, 1));
    assert!(png.pixels().all(|p| p.0[0] <= 5));
    let sidecar = read_json(&maps.join("maturity/cell_00000.maturity.json"));
    assert_eq!((sidecar["rows"].as_u64(), sidecar["cols"].as_u64()), (Some(1), Some(1)));

    let prep = dir.path().join("prep");
    sarcscore()
        .args(["prepare", "--patchnet"])
        .arg(&ckpt)
        .arg("--manifest")
        .arg(&manifest)
        .arg("--out")
        .arg(&prep)
        .assert()
        .success();
    let stack_sidecar = read_json(&prep.join("stacks/cell_00000.stack.json"));
    assert_eq!(stack_sidecar["patchnet_sha256"].as_str().unwrap().len(), 64);
}
