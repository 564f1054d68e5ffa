//! End-to-end tests of the `guiq` binary: exit codes, artifact layout,
//! and byte-level determinism of the pipelines.

use std::path::Path;
use std::process::{Command, Output};

use guiq::data::load_store;
use guiq::nn::load_checkpoint;

fn run_in(dir: &Path, envs: &[(&str, &str)], args: &[&str]) -> Output {
    let mut command = Command::new(env!("CARGO_BIN_EXE_guiq"));
    command.args(args).current_dir(dir).env_clear();
    for (key, value) in envs {
        command.env(key, value);
    }
    command.output().expect("binary starts")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    run_in(dir, &[], args)
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn assert_success(output: &Output) {
    assert_eq!(
        output.status.code(),
        Some(0),
        "stdout:\n{}\nstderr:\n{}",
        stdout(output),
        stderr(output)
    );
}

/// A configuration small enough for fast end-to-end runs.
const SMALL_CONFIG: &str = "episodes = 3\n\
                            total_steps = 40\n\
                            eval_every = 20\n\
                            eval_steps = 200\n";

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_success(&run(dir.path(), &["--help"]));
    assert_success(&run(dir.path(), &["--version"]));
    let help = run(dir.path(), &["--help"]);
    for subcommand in ["gen-data", "train", "eval", "xval", "sweep", "oracle", "gradcheck"] {
        assert!(stdout(&help).contains(subcommand), "help lists {subcommand}");
    }
}

#[test]
fn bad_arguments_exit_with_the_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(dir.path(), &["oracle", "--bogus-flag"]);
    assert_eq!(output.status.code(), Some(2));
    let output = run(dir.path(), &["no-such-subcommand"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_named_and_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "totl_steps = 5\n").unwrap();
    let output = run(
        dir.path(),
        &["oracle", "--config", config.to_str().unwrap()],
    );
    assert_eq!(output.status.code(), Some(2));
    assert!(
        stderr(&output).contains("totl_steps"),
        "stderr names the bad key: {}",
        stderr(&output)
    );
}

#[test]
fn bad_env_overrides_are_named_and_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_in(dir.path(), &[("GUIQ_BOGUS", "1")], &["oracle"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("GUIQ_BOGUS"));
    // A valid override changes behavior: an invalid gamma is rejected.
    let output = run_in(dir.path(), &[("GUIQ_GAMMA", "1.5")], &["oracle"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("gamma"));
}

#[test]
fn unknown_app_exits_two_and_missing_data_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(dir.path(), &["oracle", "--app", "not_an_app"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("not_an_app"));
    let output = run(
        dir.path(),
        &["train", "--data", "missing.jsonl", "--out", "m.ckpt"],
    );
    assert_eq!(output.status.code(), Some(1), "{}", stderr(&output));
}

#[test]
fn gen_data_writes_a_loadable_deterministic_store() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &str| {
        vec![
            "gen-data".to_owned(),
            "--episodes".to_owned(),
            "2".to_owned(),
            "--seed".to_owned(),
            "3".to_owned(),
            "--out".to_owned(),
            out.to_owned(),
        ]
    };
    let first = args("first.jsonl");
    let refs: Vec<&str> = first.iter().map(String::as_str).collect();
    assert_success(&run(dir.path(), &refs));
    let second = args("second.jsonl");
    let refs: Vec<&str> = second.iter().map(String::as_str).collect();
    assert_success(&run(dir.path(), &refs));

    let store = load_store(&dir.path().join("first.jsonl")).unwrap();
    assert_eq!(store.app, "settings");
    assert_eq!(store.episodes.len(), 2);
    assert_eq!(
        std::fs::read(dir.path().join("first.jsonl")).unwrap(),
        std::fs::read(dir.path().join("second.jsonl")).unwrap(),
        "identical configs must produce byte-identical episode files"
    );
    // The header embeds the config fingerprint.
    let text = std::fs::read_to_string(dir.path().join("first.jsonl")).unwrap();
    assert!(text.lines().next().unwrap().contains("\"config\""));
}

#[test]
fn train_eval_round_trip_through_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let cfg = config.to_str().unwrap();

    assert_success(&run(
        dir.path(),
        &["gen-data", "--config", cfg, "--out", "eps.jsonl"],
    ));
    assert_success(&run(
        dir.path(),
        &["train", "--config", cfg, "--data", "eps.jsonl", "--out", "model.ckpt"],
    ));

    // Checkpoint, vocabulary, and metrics artifacts exist and agree.
    let (_, fingerprint) = load_checkpoint(&dir.path().join("model.ckpt"), None).unwrap();
    let vocab = guiq::featurize::Vocabulary::load(&dir.path().join("model_vocab.json")).unwrap();
    assert_eq!(vocab.fingerprint(), fingerprint);
    let metrics = std::fs::read_to_string(dir.path().join("model_metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert!(lines.next().unwrap().starts_with("# config="));
    assert_eq!(lines.next().unwrap(), "step,loss,eval_reward,eval_unique_states");
    // Hooks at steps 0, 20, 40 produce three data rows.
    assert_eq!(lines.count(), 3);

    // The checkpoint drives both network policies.
    for policy in ["greedy", "sampler"] {
        let mut args = vec![
            "eval", "--config", cfg, "--policy", policy, "--checkpoint", "model.ckpt",
        ];
        if policy == "sampler" {
            args.extend(["--temperature", "0.1"]);
        }
        let output = run(dir.path(), &args);
        assert_success(&output);
        assert!(stdout(&output).contains("total_reward ="));
    }

    // Forgetting the checkpoint is a configuration error.
    let output = run(dir.path(), &["eval", "--config", cfg, "--policy", "greedy"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("--checkpoint"));
}

#[test]
fn qhash_baseline_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let cfg = config.to_str().unwrap();

    assert_success(&run(
        dir.path(),
        &["gen-data", "--config", cfg, "--out", "eps.jsonl"],
    ));
    assert_success(&run(
        dir.path(),
        &["train", "--config", cfg, "--data", "eps.jsonl", "--qhash", "--out", "table.json"],
    ));
    let output = run(
        dir.path(),
        &["eval", "--config", cfg, "--policy", "qhash", "--qtable", "table.json"],
    );
    assert_success(&output);
    assert!(stdout(&output).contains("policy = qhash"));

    let output = run(dir.path(), &["eval", "--config", cfg, "--policy", "random"]);
    assert_success(&output);
    assert!(stdout(&output).contains("policy = random"));
}

#[test]
fn oracle_reports_exact_and_monte_carlo_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(
        dir.path(),
        &["oracle", "--mc-episodes", "40", "--seed", "11"],
    );
    assert_success(&output);
    let text = stdout(&output);
    assert!(text.contains("expected_hitting_time = "), "{text}");
    assert!(text.contains("mc_hitting_time = "), "{text}");
    let exact: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("expected_hitting_time = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(exact.is_finite() && exact > 1.0);
}

#[test]
fn gradcheck_passes_quickly_on_default_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(
        dir.path(),
        &["gradcheck", "--instances", "3", "--seed", "5"],
    );
    assert_success(&output);
    assert!(stdout(&output).contains("gradient check passed"));
    // An absurd tolerance cannot be met; the failure is a pipeline error.
    let output = run(
        dir.path(),
        &["gradcheck", "--instances", "1", "--tolerance", "1e-18"],
    );
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("gradient check failed"));
}
