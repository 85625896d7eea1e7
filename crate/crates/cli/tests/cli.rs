//! End-to-end CLI checks: help coverage, exit codes, config precedence, and
//! byte-identical regeneration from manifests.

use std::path::{Path, PathBuf};
use std::process::Command;

use clap::CommandFactory;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_patchprobe"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ppcli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn train_tiny(dir: &Path, arch: &str) -> PathBuf {
    let ckpt = dir.join(format!("{arch}.ckpt"));
    let status = bin()
        .args([
            "train",
            "--arch",
            arch,
            "--data",
            "synth:192:seed=0",
            "--num-classes",
            "4",
            "--epochs",
            "2",
            "--out",
        ])
        .arg(&ckpt)
        .status()
        .unwrap();
    assert!(status.success());
    ckpt
}

#[test]
fn every_flag_of_every_subcommand_is_documented() {
    let root = patchprobe::cli::Cli::command();
    for sub in root.get_subcommands() {
        assert!(
            sub.get_about().is_some(),
            "subcommand {} lacks a description",
            sub.get_name()
        );
        for arg in sub.get_arguments() {
            if arg.get_id() == "help" || arg.get_id() == "version" {
                continue;
            }
            assert!(
                arg.get_help().is_some(),
                "flag --{} of {} lacks help text",
                arg.get_id(),
                sub.get_name()
            );
        }
    }
}

#[test]
fn exit_codes_follow_the_table() {
    let dir = workdir("exit");

    // 2: usage errors (unknown subcommand via clap, bad dataset spec via us)
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2), "unknown subcommand");
    let out = bin()
        .args(["train", "--arch", "vit", "--data", "nonsense:spec", "--out"])
        .arg(dir.join("x.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "bad dataset spec");

    // 3: data/format errors (missing checkpoint, corrupt checkpoint)
    let out = bin()
        .args(["attack", "--model", "/nonexistent/m.ckpt", "--data", "synth:8:seed=0", "--report"])
        .arg(dir.join("r.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "missing checkpoint");
    let garbage = dir.join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint at all").unwrap();
    let out = bin()
        .args(["attack", "--model"])
        .arg(&garbage)
        .args(["--data", "synth:8:seed=0", "--report"])
        .arg(dir.join("r.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "corrupt checkpoint");

    // 4: runtime/numeric error (impossible gradient tolerance)
    let out = bin().args(["gradcheck", "--tol", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(4), "failing gradcheck");

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_attack_report_and_rerun_are_byte_identical() {
    let dir = workdir("rerun");
    let ckpt = train_tiny(&dir, "mixer");
    assert!(dir.join("mixer.ckpt.manifest.json").exists(), "train writes a manifest");

    let report = dir.join("attack.json");
    let status = bin()
        .args(["attack", "--model"])
        .arg(&ckpt)
        .args([
            "--data",
            "synth:48:seed=5",
            "--max-eval",
            "6",
            "--iters",
            "8",
            "--step",
            "2/255",
            "--seed",
            "3",
            "--report",
        ])
        .arg(&report)
        .status()
        .unwrap();
    assert!(status.success());

    let manifest_path = dir.join("attack.json.manifest.json");
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&manifest_path).unwrap()).unwrap();
    // fractions normalized to decimals in the resolved config
    let step = manifest["config"]["step"].as_f64().unwrap();
    assert!((step - 2.0 / 255.0).abs() < 1e-12);
    assert_eq!(manifest["subcommand"], "attack");

    let original = std::fs::read(&report).unwrap();
    let status = bin().arg("rerun").arg(&manifest_path).status().unwrap();
    assert!(status.success());
    let regenerated = std::fs::read(&report).unwrap();
    assert_eq!(original, regenerated, "report must regenerate byte-identically");

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn config_file_and_flags_layer_correctly() {
    let dir = workdir("config");
    let config = dir.join("attack.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "iters": 5,
            "seed": 9,
            "max_eval": 4,
        })
        .to_string(),
    )
    .unwrap();
    let ckpt = train_tiny(&dir, "mixer");
    let report = dir.join("out.json");
    // flag overrides the file's iters; the file's seed survives
    let status = bin()
        .args(["attack", "--config"])
        .arg(&config)
        .args(["--model"])
        .arg(&ckpt)
        .args(["--data", "synth:32:seed=1", "--iters", "3", "--report"])
        .arg(&report)
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("out.json.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["iters"], 3, "flag beats config file");
    assert_eq!(manifest["config"]["seed"], 9, "config file beats default");
    assert_eq!(manifest["config"]["max_eval"], 4);

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn env_seed_is_the_last_resort_default() {
    let dir = workdir("envseed");
    let report = dir.join("sweep.json");
    let ckpt = train_tiny(&dir, "mixer");
    let status = bin()
        .env("PATCHPROBE_SEED", "77")
        .args(["attack", "--model"])
        .arg(&ckpt)
        .args(["--data", "synth:16:seed=2", "--max-eval", "3", "--iters", "2", "--report"])
        .arg(&report)
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("sweep.json.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["seed"], 77);
    assert_eq!(manifest["seeds"][0], 77);

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn pair_train_shares_one_config_hash() {
    let dir = workdir("pair");
    let status = bin()
        .args([
            "pair-train",
            "--archs",
            "mixer,vit",
            "--data",
            "synth:96:seed=0",
            "--num-classes",
            "4",
            "--epochs",
            "1",
            "--out-dir",
        ])
        .arg(&dir)
        .status()
        .unwrap();
    assert!(status.success());
    let (_, meta_a) = patchprobe_core::train::load_checkpoint(&dir.join("mixer.ckpt")).unwrap();
    let (_, meta_b) = patchprobe_core::train::load_checkpoint(&dir.join("vit.ckpt")).unwrap();
    assert_eq!(meta_a.train_config_hash, meta_b.train_config_hash);
    assert!(meta_a.train_config_hash.is_some());

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn sweep_reports_are_independent_of_jobs() {
    let dir = workdir("jobs");
    let ckpt = train_tiny(&dir, "mixer");
    let report = dir.join("sweep.json");
    let mut reports = Vec::new();
    for jobs in ["1", "8"] {
        let status = bin()
            .args(["--jobs", jobs, "attack", "--model"])
            .arg(&ckpt)
            .args([
                "--data",
                "synth:24:seed=3",
                "--max-eval",
                "4",
                "--iters",
                "4",
                "--sweep-positions",
                "--seed",
                "5",
                "--report",
            ])
            .arg(&report)
            .status()
            .unwrap();
        assert!(status.success());
        reports.push(std::fs::read(&report).unwrap());
    }
    assert_eq!(reports[0], reports[1], "serial and --jobs 8 sweeps must match");

    std::fs::remove_dir_all(&dir).ok();
}
