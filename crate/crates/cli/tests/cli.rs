use std::path::Path;
use std::process::{Command, Output};

use flsc_core::config::ExperimentConfig;
use flsc_core::hvt::Task;

fn flsc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flsc"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> String {
    let cfg = ExperimentConfig {
        task: Task::Reconstruct,
        rounds: Some(1),
        local_epochs: 1,
        train_scenes: 16,
        test_scenes: 4,
        refiner_steps: 5,
        out_dir: dir.join("run"),
        ..ExperimentConfig::default()
    };
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn invalid_values_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = flsc(&["train", "--delta", "2"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("delta"));

    let out = flsc(&["train", "--task", "segment"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = flsc(&["train", "--config", "absent.json"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = flsc(&["eval", "--checkpoint", "absent.flsc"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn tiny_training_run_succeeds_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = flsc(&["train", "--config", &config, "--seed", "4"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    let csv = std::fs::read_to_string(run.join("rounds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().ends_with(",4"));

    let again = flsc(&["train", "--config", &config, "--seed", "4"], dir.path());
    assert_eq!(again.status.code(), Some(2));

    let ckpt = run.join("final.flsc").display().to_string();
    let eval = flsc(&["eval", "--config", &config, "--checkpoint", &ckpt], dir.path());
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(report["psnr"].as_f64().unwrap().is_finite());
}
