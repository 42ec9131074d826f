//! End-to-end checks of the binary: exit codes, dry runs, the score
//! subcommand, and hermetic writes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scenemt"))
}

fn write_smoke_config(dir: &Path) -> PathBuf {
    let out_dir = dir.join("runs");
    let text = format!(
        "[data]\nseed = 5\nout_dir = {}\nn_train = 30\nn_dev = 8\nn_test = 8\nambiguous_fraction = 0.5\n\
         [diffusion]\ntimesteps = 5\nhidden = 8\nctx_dim = 4\nmax_epochs = 1\nbatch_size = 8\n\
         [ddpo]\nsteps = 1\ncontexts_per_step = 2\nsamples_per_context = 1\n\
         [translator]\nd_model = 8\nblocks = 1\nheads = 2\nff_dim = 16\nepochs = 1\nbatch_size = 8\ncheckpoint_every = 2\ncapture_batches = 1\n",
        out_dir.display()
    );
    let path = dir.join("test.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_config_argument_exits_1_with_usage() {
    let out = bin().arg("gen-data").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--config"), "stderr: {stderr}");
}

#[test]
fn nonexistent_config_file_exits_1() {
    let out = bin()
        .args(["gen-data", "--config", "/nonexistent/path.cfg"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_override_key_exits_1_before_any_work() {
    let dir = std::env::temp_dir().join("scenemt_cli_override");
    std::fs::create_dir_all(&dir).unwrap();
    let config = write_smoke_config(&dir);
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&config)
        .args(["--set", "data.bogus=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.join("runs").exists(), "no run directory may be created");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn dry_run_prints_a_plan_without_side_effects() {
    let dir = std::env::temp_dir().join("scenemt_cli_dryrun");
    std::fs::create_dir_all(&dir).unwrap();
    let config = write_smoke_config(&dir);
    for sub in [
        "gen-data",
        "train-diffusion",
        "train-ddpo",
        "train-translator",
        "eval",
        "ablate",
        "curve",
    ] {
        let out = bin()
            .args([sub, "--dry-run", "--config"])
            .arg(&config)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{sub} dry-run failed");
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("run directory:"), "{sub}: {stdout}");
    }
    assert!(!dir.join("runs").exists(), "dry runs must not write anything");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn eval_before_training_names_the_missing_artifact() {
    let dir = std::env::temp_dir().join("scenemt_cli_missing");
    std::fs::create_dir_all(&dir).unwrap();
    let config = write_smoke_config(&dir);
    let out = bin().args(["eval", "--config"]).arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("missing checkpoint") && stderr.contains("model_final.bin"),
        "stderr: {stderr}"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gen_data_twice_produces_identical_files() {
    let dir = std::env::temp_dir().join("scenemt_cli_gendata");
    std::fs::create_dir_all(&dir).unwrap();
    let config = write_smoke_config(&dir);
    let run = || {
        let out = bin().args(["gen-data", "--config"]).arg(&config).output().unwrap();
        assert_eq!(out.status.code(), Some(0));
        let runs = std::fs::read_dir(dir.join("runs")).unwrap();
        let hash_dir = runs.into_iter().next().unwrap().unwrap().path();
        std::fs::read(hash_dir.join("data/train.jsonl")).unwrap()
    };
    let first = run();
    let second = run();
    assert_eq!(first, second);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn score_prints_per_pair_rewards_as_csv() {
    let dir = std::env::temp_dir().join("scenemt_cli_score");
    std::fs::create_dir_all(&dir).unwrap();
    let lsg = dir.join("lsg.jsonl");
    let vsg = dir.join("vsg.jsonl");
    std::fs::write(
        &lsg,
        concat!(
            r#"{"triples": [["circle#1", "has-color", "red"]]}"#,
            "\n",
            r#"{"triples": [["circle#1", "left-of", "square#1"], ["circle#1", "has-color", "red"]]}"#,
            "\n"
        ),
    )
    .unwrap();
    std::fs::write(
        &vsg,
        concat!(
            r#"{"triples": [["circle#1", "has-color", "red"]]}"#,
            "\n",
            r#"{"triples": [["circle#1", "has-color", "red"]]}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = bin()
        .args(["score", "--lsg"])
        .arg(&lsg)
        .arg("--vsg")
        .arg(&vsg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "index,reward");
    assert_eq!(lines[1], "0,1.000000");
    // second pair: color triple matches at 1, relation triple at best 1/3
    // (heads agree only) -> mean 2/3
    assert_eq!(lines[2], "1,0.666667");

    // mismatched line counts are a validation error
    std::fs::write(dir.join("short.jsonl"), "{\"triples\": []}\n").unwrap();
    let out = bin()
        .args(["score", "--lsg"])
        .arg(&lsg)
        .arg("--vsg")
        .arg(dir.join("short.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    std::fs::remove_dir_all(&dir).ok();
}
