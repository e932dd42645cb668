use std::path::Path;
use std::process::{Command, Output};

fn sarad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sarad")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn help_lists_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let help = stdout(&sarad(dir.path(), &["--help"]));
    for cmd in ["train", "collect-risk-data", "train-risk-model", "plot", "compare", "serve"] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn train_plot_compare_with_embedded_service() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), r#"{"agent":{"warmup":200}}"#).unwrap();
    let out = stdout(&sarad(
        dir.path(),
        &["train", "--variant", "vanilla_dqn", "--steps", "800", "--seed", "3", "--config", "run.json", "--out", "exp"],
    ));
    assert!(out.contains("metrics log:"), "{out}");
    assert!(dir.path().join("exp/vanilla_dqn_seed3.csv").exists());
    assert!(dir.path().join("exp/vanilla_dqn_seed3.qnet").exists());

    let plotted = stdout(&sarad(dir.path(), &["plot", "--out", "exp", "--window", "20"]));
    assert_eq!(plotted.lines().count(), 3);
    assert!(dir.path().join("exp/plots/avg_reward.svg").exists());

    let table = stdout(&sarad(dir.path(), &["compare", "vanilla_dqn_seed3.csv", "--out", "exp", "--window", "400"]));
    assert!(table.contains("vanilla_dqn") && table.contains("last 400 steps"), "{table}");
}

#[test]
fn risk_data_and_model() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sim.cfg"), "# fewer cars\nvehicles = 8\n").unwrap();
    let collected = stdout(&sarad(
        dir.path(),
        &[
            "collect-risk-data",
            "--episodes",
            "150",
            "--per-class",
            "150",
            "--seed",
            "1",
            "--sim-config",
            "sim.cfg",
            "--out",
            "risk",
        ],
    ));
    assert!(collected.contains("150 positive, 150 negative"), "{collected}");
    let trained = stdout(&sarad(dir.path(), &["train-risk-model", "--variant", "lr", "--out", "risk"]));
    assert!(trained.contains("held-out AUC"), "{trained}");
    assert!(dir.path().join("risk/risk_model_lr.json").exists());
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = sarad(dir.path(), &["train", "--variant", "sarad_x"]);
    assert!(!unknown.status.success());
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("unknown variant"));
    let missing = sarad(dir.path(), &["train-risk-model", "--out", "nowhere"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
    let unreachable = sarad(dir.path(), &["--server", "http://127.0.0.1:9", "compare"]);
    assert!(String::from_utf8_lossy(&unreachable.stderr).contains("not reachable"));
}
