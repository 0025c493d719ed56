use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mhattnsurv"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn mhattnsurv")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

/// Relative path -> contents for every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn small_cohort(dir: &Path) {
    write(
        dir,
        "synth.json",
        r#"{"synthetic": {"patients": 40, "patches_min": 12, "patches_max": 20, "dim": 8, "beta": 4.0}}"#,
    );
    ok(dir, &["synth", "--config", "synth.json", "--seed", "3", "--out", "data"]);
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let last = stderr.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("`{last}` is not JSON: {e}"))
}

#[test]
fn synth_is_reproducible_across_output_dirs() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "s.json", r#"{"synthetic": {"patients": 30, "patches_min": 8, "patches_max": 8, "dim": 4}}"#);
    ok(tmp.path(), &["synth", "--config", "s.json", "--seed", "42", "--out", "a"]);
    ok(tmp.path(), &["synth", "--config", "s.json", "--seed", "42", "--out", "b"]);
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    assert!(a.contains_key(Path::new("manifest.json")));
    assert!(a.contains_key(Path::new("effective_config.json")));
    assert_eq!(a, b);

    ok(tmp.path(), &["synth", "--config", "s.json", "--seed", "43", "--out", "c"]);
    assert_ne!(a, tree(&tmp.path().join("c")));
}

#[test]
fn effective_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "s.json", r#"{"synthetic": {"patients": 20, "patches_min": 8, "patches_max": 8, "dim": 4}}"#);
    ok(tmp.path(), &["synth", "--config", "s.json", "--seed", "9", "--out", "a"]);
    ok(tmp.path(), &["synth", "--config", "a/effective_config.json", "--out", "b"]);
    assert_eq!(tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
}

#[test]
fn eval_of_perfect_predictions() {
    let tmp = TempDir::new().unwrap();
    small_cohort(tmp.path());
    let labels = std::fs::read_to_string(tmp.path().join("data/labels.csv")).unwrap();
    let mut preds = String::from("id,risk\n");
    for line in labels.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let time: f64 = f[1].parse().unwrap();
        preds.push_str(&format!("{},{}\n", f[0], -time));
    }
    write(tmp.path(), "preds.csv", &preds);
    write(tmp.path(), "e.json", r#"{"dataset": "data", "predictions": "preds.csv"}"#);
    ok(tmp.path(), &["eval", "--config", "e.json", "--out", "ev"]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["c_index"], 1.0);
    for name in ["metrics.csv", "km.csv", "predictions.csv", "effective_config.json"] {
        assert!(tmp.path().join("ev").join(name).exists(), "{name}");
    }
}

#[test]
fn train_then_eval_and_attnmap() {
    let tmp = TempDir::new().unwrap();
    small_cohort(tmp.path());
    write(
        tmp.path(),
        "t.json",
        r#"{"dataset": "data", "train": {"max_epochs": 3, "heads": 2, "patches_per_patient": 8, "val_patches": 8}}"#,
    );
    ok(tmp.path(), &["train", "--config", "t.json", "--out", "tr"]);
    let history = std::fs::read_to_string(tmp.path().join("tr/history.csv")).unwrap();
    assert!(history.starts_with("epoch,"));

    write(
        tmp.path(),
        "e.json",
        r#"{"dataset": "data", "checkpoint": "tr/model.mhck", "test_patches": 8}"#,
    );
    ok(tmp.path(), &["eval", "--config", "e.json", "--out", "ev"]);
    let heads = std::fs::read_to_string(tmp.path().join("ev/heads.csv")).unwrap();
    assert_eq!(heads.lines().count(), 1 + 2 + 1);

    let bag = std::fs::read_dir(tmp.path().join("data/bags"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .min()
        .unwrap();
    let n = mhattnsurv::data::load_bag(&bag).unwrap().n();
    let coords: String = std::iter::once("patch,row,col\n".to_string())
        .chain((0..n).map(|i| format!("{i},{},{}\n", i / 4, i % 4)))
        .collect();
    write(tmp.path(), "coords.csv", &coords);
    let cfg = serde_json::json!({"checkpoint": "tr/model.mhck", "bag": bag, "coords": "coords.csv", "group_size": 4});
    write(tmp.path(), "a.json", &cfg.to_string());
    ok(tmp.path(), &["attnmap", "--config", "a.json", "--out", "am"]);
    let csv = std::fs::read_to_string(tmp.path().join("am/attention.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + n * 2);
    assert!(tmp.path().join("am/head_1.pgm").exists());
    assert!(tmp.path().join("am/head_2.pgm").exists());

    let cfg = serde_json::json!({"checkpoint": "tr/model.mhck", "bag": bag, "images": true});
    write(tmp.path(), "b.json", &cfg.to_string());
    let out = run(tmp.path(), &["attnmap", "--config", "b.json", "--out", "am2"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");
    assert!(tmp.path().join("am2/attention.csv").exists());
}

#[test]
fn cv_single_thread_runs_are_identical() {
    let tmp = TempDir::new().unwrap();
    small_cohort(tmp.path());
    write(
        tmp.path(),
        "cv.json",
        r#"{"dataset": "data", "outer_folds": 3, "inner_folds": 2,
            "grid": {"dropout_rates": [0.0, 0.5]},
            "train": {"max_epochs": 2, "heads": 2, "patches_per_patient": 8, "val_patches": 8, "test_patches": 8}}"#,
    );
    ok(tmp.path(), &["cv", "--config", "cv.json", "--threads", "1", "--out", "r1"]);
    ok(tmp.path(), &["cv", "--config", "cv.json", "--threads", "1", "--out", "r2"]);
    let (a, b) = (tree(&tmp.path().join("r1")), tree(&tmp.path().join("r2")));
    assert_eq!(a, b);
    let preds = String::from_utf8(a[Path::new("cv_predictions.csv")].clone()).unwrap();
    assert_eq!(preds.lines().count(), 1 + 40);
}

#[test]
fn ablate_writes_one_row_per_head_count() {
    let tmp = TempDir::new().unwrap();
    small_cohort(tmp.path());
    write(
        tmp.path(),
        "ab.json",
        r#"{"dataset": "data", "outer_folds": 2, "inner_folds": 2,
            "grid": {"dropout_rates": [0.0], "head_counts": [1, 2]},
            "train": {"max_epochs": 1, "patches_per_patient": 8, "val_patches": 8, "test_patches": 8}}"#,
    );
    ok(tmp.path(), &["ablate", "--config", "ab.json", "--out", "ab"]);
    let csv = std::fs::read_to_string(tmp.path().join("ab/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
}

#[test]
fn filter_patches_reports_each_file() {
    let tmp = TempDir::new().unwrap();
    std::fs::create_dir(tmp.path().join("patches")).unwrap();
    let ppm = |rgb: [u8; 3]| {
        let mut bytes = b"P6\n16 16\n255\n".to_vec();
        for _ in 0..256 {
            bytes.extend(rgb);
        }
        bytes
    };
    std::fs::write(tmp.path().join("patches/a.ppm"), ppm([200, 60, 200])).unwrap();
    std::fs::write(tmp.path().join("patches/b.ppm"), ppm([240, 240, 240])).unwrap();
    write(
        tmp.path(),
        "f.json",
        r#"{"inputs": ["patches"], "filter": {"min_purple": 100, "margin": 16, "patch_size": 16}}"#,
    );
    ok(tmp.path(), &["filter-patches", "--config", "f.json", "--out", "fl"]);
    let csv = std::fs::read_to_string(tmp.path().join("fl/filter.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].ends_with(",256,1"), "{csv}");
    assert!(rows[1].ends_with(",0,0"), "{csv}");
}

#[test]
fn unknown_keys_are_rejected_on_one_line() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "bad.json", r#"{"dataset": "d", "bogus": 1, "train": {"lr": 2}}"#);
    let out = run(tmp.path(), &["cv", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    let err = error_json(&out);
    assert_eq!(err["error"], "config");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("bogus") && msg.contains("train.lr"), "{msg}");
}

#[test]
fn invocation_errors_are_machine_parseable() {
    let tmp = TempDir::new().unwrap();
    let out = run(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");

    let out = run(tmp.path(), &["eval", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "path");

    let help = run(tmp.path(), &["--help"]);
    assert!(help.status.success());
}
