use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candling::data::{preprocess, PreprocessPolicy};

fn candling(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_candling")).arg("--config").arg(&path).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small(dir: &Path, top: &str, models: &str) -> String {
    format!(
        "out = {:?}\n{top}\n[synth]\nn_fertile = 12\nn_infertile = 12\nsize = [64, 64]\nseed = 3\n\n[data]\nk = 2\nseed = 3\n\n[models]\nreference_input = [32, 32]\n{models}\n[train]\nepochs = 2\nbatch = 4\noptimizer = \"adam\"\nlr = 0.001\nseed = 3\n",
        dir.join("out")
    )
}

fn manifest_rows(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("out/data/manifest.csv")).unwrap().lines().skip(1).map(String::from).collect()
}

#[test]
fn synthetic_prepare_splits_four_to_one_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let config = format!("out = {:?}\n[synth]\nsize = [48, 48]\nseed = 1\n[models]\nreference_input = [32, 32]\n", dir.path().join("out"));
    ok(&candling(dir.path(), &config, &["prepare", "--synthetic"]));
    let rows = manifest_rows(dir.path());
    assert_eq!(rows.len(), 200);
    assert_eq!(rows.iter().filter(|r| r.contains(",train,")).count(), 160);
    assert_eq!(rows.iter().filter(|r| r.contains(",test,")).count(), 40);
    let first = fs::read(dir.path().join("out/data/manifest.csv")).unwrap();
    ok(&candling(dir.path(), &config, &["prepare", "--synthetic"]));
    assert_eq!(fs::read(dir.path().join("out/data/manifest.csv")).unwrap(), first);
    assert!(dir.path().join("out/data/config.toml").is_file());
}

#[test]
fn input_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_dir");
    let out = candling(dir.path(), &format!("[data]\nroot = {missing:?}\n"), &["prepare"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no_such_dir"), "{}", stderr(&out));

    let out = candling(dir.path(), "[train]\nlearning_rate = 0.1\n", &["prepare"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    let out = Command::new(env!("CARGO_BIN_EXE_candling")).args(["--config", "/nonexistent.toml", "report"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(dir.path(), "", "");
    for cmd in [&["crossval"][..], &["train"], &["evaluate"], &["augment-preview"]] {
        let out = candling(dir.path(), &config, cmd);
        assert_eq!(out.status.code(), Some(3), "{cmd:?}: {}", stderr(&out));
        assert!(stderr(&out).contains("manifest.csv"), "{}", stderr(&out));
    }
    let out = candling(dir.path(), &config, &["report"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("crossval.json"), "{}", stderr(&out));

    ok(&candling(dir.path(), &config, &["prepare", "--synthetic"]));
    let out = candling(dir.path(), &config, &["evaluate"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("model.safetensors"), "{}", stderr(&out));
    let out = candling(dir.path(), &config, &["evaluate", "--checkpoint", "nope.safetensors"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("nope.safetensors"));
}

#[test]
fn pretrained_backbone_without_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let config = small(dir.path(), "backbone = \"mobilenet\"", &format!("cache_dir = {cache:?}"));
    let out = candling(dir.path(), &config, &["prepare", "--synthetic"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("mobilenet.safetensors"), "{}", stderr(&out));
    // Offline mode swaps in the reference network.
    ok(&candling(dir.path(), &config, &["--offline", "prepare", "--synthetic"]));
    ok(&candling(dir.path(), &config, &["--offline", "train"]));
    assert!(dir.path().join("out/runs/reference/final/model.safetensors").is_file());
}

fn tile(sheet: &image::RgbImage, i: u32, side: u32, cols: u32) -> image::RgbImage {
    image::imageops::crop_imm(sheet, (i % cols) * side, (i / cols) * side, side, side).to_image()
}

#[test]
fn augment_preview_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(dir.path(), "", "");
    ok(&candling(dir.path(), &config, &["prepare", "--synthetic"]));
    ok(&candling(dir.path(), &config, &["augment-preview", "--n", "9"]));
    let path = dir.path().join("out/preview/augment_preview.png");
    let first = fs::read(&path).unwrap();
    assert_eq!(image::open(&path).unwrap().to_rgb8().dimensions(), (96, 96));
    ok(&candling(dir.path(), &config, &["augment-preview", "--n", "9"]));
    assert_eq!(fs::read(&path).unwrap(), first);

    let out = candling(dir.path(), &config, &["augment-preview", "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));

    let identity = format!(
        "{config}\n[augment]\nrotation = [0.0, 0.0]\nflip_x = false\nflip_y = false\nshear = [0.0, 0.0]\nscale = [1.0, 1.0]\ntranslate = [0.0, 0.0]\n"
    );
    ok(&candling(dir.path(), &identity, &["augment-preview", "--n", "4"]));
    let sheet = image::open(&path).unwrap().to_rgb8();
    let source = image::open(dir.path().join("out/synthetic/fertile/fertile_0000.png")).unwrap().to_rgb8();
    let expected = preprocess(&source, &PreprocessPolicy::new((32, 32))).unwrap();
    for i in 0..4 {
        assert_eq!(tile(&sheet, i, 32, 2), expected, "tile {i}");
    }
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

#[test]
fn train_evaluate_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(dir.path(), "", "");
    ok(&candling(dir.path(), &config, &["prepare", "--synthetic"]));
    ok(&candling(dir.path(), &config, &["crossval"]));
    ok(&candling(dir.path(), &config, &["train"]));
    let runs = dir.path().join("out/runs/reference");
    let history = fs::read(runs.join("final/history.jsonl")).unwrap();
    let model = fs::read(runs.join("final/model.safetensors")).unwrap();
    let crossval = fs::read(runs.join("crossval.json")).unwrap();
    ok(&candling(dir.path(), &config, &["train"]));
    ok(&candling(dir.path(), &config, &["crossval"]));
    assert_eq!(fs::read(runs.join("final/history.jsonl")).unwrap(), history);
    assert_eq!(fs::read(runs.join("final/model.safetensors")).unwrap(), model);
    let strip = |bytes: &[u8]| {
        let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
        v["runs"].as_array_mut().unwrap().iter_mut().for_each(|r| r["wall_time_s"] = 0.into());
        v
    };
    assert_eq!(strip(&fs::read(runs.join("crossval.json")).unwrap()), strip(&crossval));
    assert!(runs.join("fold1/model.safetensors").is_file() && runs.join("config.toml").is_file());

    let checkpoint = runs.join("final/model.safetensors");
    ok(&candling(dir.path(), &config, &["evaluate", "--checkpoint", checkpoint.to_str().unwrap()]));
    let eval = dir.path().join("out/eval/reference");
    for (file, split, n) in [("metrics.json", "test", 4), ("metrics_train.json", "train", 20)] {
        let m = json(eval.join(file));
        assert_eq!(m["split"], split);
        assert_eq!(m["backbone"], "reference");
        assert_eq!(m["n"], n);
        let cm = &m["cm"];
        let total: u64 = ["tp", "tn", "fp", "fn"].iter().map(|k| cm[k].as_u64().unwrap()).sum();
        assert_eq!(total, n);
        for key in ["auc", "accuracy", "recall", "specificity", "precision"] {
            let v = &m[key];
            let defined = v["defined"].as_bool().unwrap();
            assert_eq!(defined, v["value"].is_f64(), "{key}: {v}");
            if defined {
                assert!((0.0..=1.0).contains(&v["value"].as_f64().unwrap()));
            }
        }
    }
    assert_eq!(fs::read_to_string(eval.join("predictions.csv")).unwrap().lines().count(), 5);

    ok(&candling(dir.path(), &config, &["report"]));
    let reports = dir.path().join("out/reports");
    let table = fs::read_to_string(reports.join("table1.md")).unwrap();
    assert!(table.contains("| Reference CNN | Training |") && table.contains("| Reference CNN | Testing |"), "{table}");
    for f in ["table1.csv", "crossval_reference.txt", "curves_reference_fold0.svg", "curves_reference_fold1.png", "curves_reference_fold1.jsonl", "config.toml"] {
        assert!(reports.join(f).is_file(), "{f}");
    }
    let summary = fs::read_to_string(reports.join("crossval_reference.txt")).unwrap();
    assert!(summary.contains("fold 0: ") && summary.contains("mean ") && summary.contains("std "), "{summary}");
}

#[test]
fn divergence_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(dir.path(), "", "").replace("lr = 0.001", "lr = 1e30").replace("\"adam\"", "\"sgd_momentum\"");
    ok(&candling(dir.path(), &config, &["prepare", "--synthetic"]));
    let out = candling(dir.path(), &config, &["train"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    let out = candling(dir.path(), &config, &["crossval"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(dir.path().join("out/runs/reference/crossval.json").is_file());
}

#[test]
fn help_lists_every_flag() {
    let help = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_candling")).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}");
        String::from_utf8(out.stdout).unwrap()
    };
    let top = help(&["--help"]);
    for cmd in ["prepare", "synth", "augment-preview", "train", "crossval", "evaluate", "report"] {
        assert!(top.contains(cmd), "{cmd}");
        let text = help(&[cmd, "--help"]);
        for flag in ["--config", "--seed", "--out", "--offline", "--help"] {
            assert!(text.contains(flag), "{cmd} help lacks {flag}");
        }
    }
    assert!(help(&["prepare", "--help"]).contains("--synthetic"));
    assert!(help(&["augment-preview", "--help"]).contains("--n"));
    assert!(help(&["evaluate", "--help"]).contains("--checkpoint"));
}
