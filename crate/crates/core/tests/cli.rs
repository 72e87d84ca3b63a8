use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use gradleak::detection::plant_rtf_head;
use gradleak::models::Classifier;
use serde_json::Value;
use tempfile::TempDir;

fn gradleak(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradleak"))
        .args(["--preset", "quick", "--out"])
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_lines(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("stdout is JSON lines"))
        .collect()
}

/// One quick demo shared by every test that needs a finished run.
fn finished_run() -> &'static Path {
    static RUN: OnceLock<TempDir> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let o = gradleak(dir.path(), &["demo"]);
        assert!(o.status.success(), "demo failed: {}", String::from_utf8_lossy(&o.stderr));
        dir
    })
    .path()
}

fn copy_run(src: &Path) -> TempDir {
    fn walk(src: &Path, dst: &Path) {
        std::fs::create_dir_all(dst).unwrap();
        for e in std::fs::read_dir(src).unwrap() {
            let e = e.unwrap();
            let to = dst.join(e.file_name());
            if e.file_type().unwrap().is_dir() {
                walk(&e.path(), &to);
            } else {
                std::fs::copy(e.path(), to).unwrap();
            }
        }
    }
    let dir = TempDir::new().unwrap();
    walk(src, dir.path());
    dir
}

#[test]
fn demo_writes_every_stage() {
    let run = finished_run();
    for f in [
        "config.json",
        "pretrain/robust.ck",
        "spab/model.ck",
        "round/update.ck",
        "extract/candidates.json",
        "reconstruct/report.json",
        "preimage/report.json",
        "detect/report.json",
        "evaluate/summary.csv",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn rerun_of_finished_stage_is_skipped() {
    let dir = copy_run(finished_run());
    let o = gradleak(dir.path(), &["extract"]);
    assert!(o.status.success());
    assert_eq!(stdout_lines(&o)[0]["outcome"], "up_to_date");
}

#[test]
fn changed_seed_reruns_stage() {
    let dir = copy_run(finished_run());
    let o = gradleak(dir.path(), &["--seed", "7", "pretrain-at"]);
    assert!(o.status.success());
    assert_eq!(stdout_lines(&o)[0]["outcome"], "ran");
}

#[test]
fn detect_flags_planted_rtf_head() {
    let dir = copy_run(finished_run());
    let clean = gradleak(dir.path(), &["detect"]);
    assert_eq!(clean.status.code(), Some(0), "{}", String::from_utf8_lossy(&clean.stderr));

    let model = Classifier::load(&dir.path().join("spab/model.ck")).unwrap();
    let planted = plant_rtf_head(&model, 32).unwrap();
    let path: PathBuf = dir.path().join("planted.ck");
    planted.save(&path).unwrap();
    let o = gradleak(dir.path(), &["detect", "--model", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stdout_lines(&o)[0]["anomalous"], true);
}

#[test]
fn evaluate_sweep_writes_csv() {
    let dir = copy_run(finished_run());
    let o = gradleak(dir.path(), &["evaluate", "--sweep", "batch-size", "8,16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(dir.path().join("evaluate/sweep.csv")).unwrap();
    assert!(rdr.records().count() >= 2);
}

#[test]
fn missing_input_writes_error_record() {
    let dir = TempDir::new().unwrap();
    let o = gradleak(dir.path(), &["extract"]);
    assert_eq!(o.status.code(), Some(1));
    let record: Value = serde_json::from_slice(&std::fs::read(dir.path().join("error.json")).unwrap()).unwrap();
    assert_eq!(record["stage"], "extract");
    assert_eq!(record["error"], "missing_input");
}

#[test]
fn unknown_sweep_kind_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = gradleak(dir.path(), &["evaluate", "--sweep", "epsilon", "1,2"]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&o.stderr);
    let err: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn show_config_roundtrips() {
    let dir = TempDir::new().unwrap();
    let o = gradleak(dir.path(), &["--seed", "11", "show-config"]);
    assert!(o.status.success());
    let cfg = gradleak::config::ExperimentConfig::from_json(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(cfg.master_seed, 11);
}
