//! End-to-end tests of the `mcl` binary: artifacts, exit codes, overrides,
//! and scheduling-independent ablation output.

use std::path::Path;
use std::process::{Command, Output};

fn mcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.conf");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = "dataset = two_moons\nseed = 5\nmoons_n_per_domain = 100\niterations = 30\neval_every = 10\nhidden_dims = 10\nfeature_dim = 6\n";

#[test]
fn generate_writes_deterministic_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "dataset = two_moons\nseed = 9\nmoons_n_per_domain = 60\n");
    let prefix = dir.path().join("bench");

    let out = mcl(&["generate", "--config", &config, "--out", prefix.to_str().unwrap()]);
    assert!(out.status.success());
    let source = std::fs::read(dir.path().join("bench_source.csv")).unwrap();
    let target = std::fs::read(dir.path().join("bench_target.csv")).unwrap();
    assert_eq!(source.iter().filter(|&&b| b == b'\n').count(), 61);
    assert_eq!(target.iter().filter(|&&b| b == b'\n').count(), 61);

    // Same config and seed: byte-for-byte identical files.
    let prefix2 = dir.path().join("again");
    let out = mcl(&["generate", "--config", &config, "--out", prefix2.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(source, std::fs::read(dir.path().join("again_source.csv")).unwrap());
    assert_eq!(target, std::fs::read(dir.path().join("again_target.csv")).unwrap());
}

#[test]
fn missing_dataset_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "seed = 1\n");
    let out = mcl(&[
        "generate",
        "--config",
        &config,
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "dataset = two_moons\nlamda1 = 2\n");
    let out = mcl(&[
        "train",
        "--config",
        &config,
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda1"));
}

#[test]
fn train_writes_all_artifacts_and_consistent_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let out = mcl(&["train", "--config", &config, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let summary = std::fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    assert!(out_dir.join("final.ckpt").exists());

    // Summary's final accuracy matches the last metrics row.
    let last = metrics.lines().last().unwrap();
    let acc_overall = last.split(',').nth(8).unwrap();
    assert!(
        summary.contains(&format!("final_accuracy_overall = {acc_overall}")),
        "summary {summary:?} vs last row acc {acc_overall}"
    );
    // Summary echoes the resolved config.
    assert!(summary.contains("dataset = two_moons"));
    assert!(summary.contains("tau = 0.95"));
}

#[test]
fn train_override_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let out = mcl(&[
        "train",
        "--config",
        &config,
        "--out",
        out_dir.to_str().unwrap(),
        "--override",
        "lambda2=0",
    ]);
    assert!(out.status.success());
    let summary = std::fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("lambda2 = 0"));
}

#[test]
fn train_multi_seed_writes_per_seed_files_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let out = mcl(&[
        "train",
        "--config",
        &config,
        "--out",
        out_dir.to_str().unwrap(),
        "--seeds",
        "1,2,3",
    ]);
    assert!(out.status.success());
    for seed in [1, 2, 3] {
        assert!(out_dir.join(format!("metrics_seed{seed}.csv")).exists());
        assert!(out_dir.join(format!("final_seed{seed}.ckpt")).exists());
    }
    let summary = std::fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("mean_overall"));
    assert!(summary.contains("std_overall"));
}

#[test]
fn train_divergence_exits_3_with_metrics_preserved() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    // Momentum above 1 compounds the velocity geometrically until the
    // parameters overflow; the saturating activations shrug off any
    // finite learning rate, so this is the honest way in.
    let out = mcl(&[
        "train",
        "--config",
        &config,
        "--out",
        out_dir.to_str().unwrap(),
        "--override",
        "momentum=4.0",
        "--override",
        "iterations=800",
        "--override",
        "eval_every=50",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("iter,loss_total"));
    let summary = std::fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("diverged = true"));
}

#[test]
fn ablate_grid_shapes_and_jobs_independence() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "dataset = two_moons\nseed = 3\nmoons_n_per_domain = 80\niterations = 10\neval_every = 10\nhidden_dims = 8\nfeature_dim = 6\n",
    );

    let run_grid = |name: &str, grid: &str, jobs: &str, seeds: &str| -> String {
        let out_dir = dir.path().join(name);
        let out = mcl(&[
            "ablate",
            "--config",
            &config,
            "--out",
            out_dir.to_str().unwrap(),
            "--grid",
            grid,
            "--jobs",
            jobs,
            "--seeds",
            seeds,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap()
    };

    let tab5 = run_grid("t5", "tab5", "1", "3");
    assert_eq!(tab5.lines().count(), 1 + 8);
    let tab4 = run_grid("t4", "tab4", "1", "3");
    assert_eq!(tab4.lines().count(), 1 + 4);
    let all_seq = run_grid("all1", "all", "1", "3,4");
    assert_eq!(all_seq.lines().count(), 1 + 24);

    // Parallel execution must not change a byte of the merged output.
    let all_par = run_grid("all4", "all", "4", "3,4");
    assert_eq!(all_seq, all_par);
}

#[test]
fn verify_negative_control_exits_1_naming_the_op() {
    let out = mcl(&["verify", "--inject-grad-bug"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("tanh"), "{stdout}");
    assert!(stdout.contains("FAIL"));
}
