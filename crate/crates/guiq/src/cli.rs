//! Command-line entry point: reproducible experiment pipelines.
//!
//! Seven subcommands cover the whole workflow — `gen-data` collects
//! random-policy episodes, `train` fits the Q-network (or the tabular
//! baseline), `eval` drives any policy in the simulator, `xval` and
//! `sweep` run the cross-validated experiment grids, `oracle` prints
//! exact random-policy hitting times, and `gradcheck` verifies the
//! network gradients against finite differences.
//!
//! All knobs live in a [`RunConfig`]: defaults are the reference setup,
//! a `--config FILE` overlays a TOML file, `GUIQ_*` environment
//! variables overlay that, and explicit command-line flags win. Every
//! artifact embeds the fingerprint of the effective configuration, and
//! identical configurations produce byte-identical artifacts.
//!
//! Exit codes: 0 on success, 1 on pipeline errors (I/O, simulation,
//! training), 2 on configuration errors (bad files, unknown keys,
//! invalid values, missing flag combinations).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{
    build_training_set, collect_random_episodes, load_store, prepare_episodes, save_store_tagged,
    CollectConfig, Episode, EpisodeStore,
};
use crate::env::{builtin_app, AppSpec, BUILTIN_APPS};
use crate::eval::{
    cell_seed, cross_validate, evaluate_policy, expected_hitting_time, mc_hitting_time, mean_sd,
    random_baseline, spearman, temperature_sweep, multi_task_sweep, EvalReport,
};
use crate::featurize::{
    build_vocabulary, vectorize_state, EdgeList, FeatureConfig, NodeFeatures, VectorizedAction,
    Vocabulary,
};
use crate::nn::{gradient_check, load_checkpoint, save_checkpoint_tagged, QNetwork, QTarget};
use crate::policy::{
    qhash_fit, Agent, GreedyAgent, QHashAgent, QHashTable, RandomAgent, SamplerAgent,
    QHASH_LEARNING_RATE, QHASH_PASSES,
};
use crate::qlearn::train;
use crate::uitree::{default_action_types, identifier_hex, UINode, UITree};

/// Exit code of pipeline failures (I/O, simulation, training).
pub const EXIT_PIPELINE: u8 = 1;
/// Exit code of configuration failures (also used by argument parsing).
pub const EXIT_CONFIG: u8 = 2;

/// A failure routed to an exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Pipeline(_) => EXIT_PIPELINE,
        }
    }
}

macro_rules! pipeline_errors {
    ($($ty:ty),* $(,)?) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Pipeline(anyhow::Error::new(e))
            }
        }
    )*};
}

pipeline_errors!(
    crate::data::DataError,
    crate::env::EnvError,
    crate::eval::EvalError,
    crate::featurize::FeaturizeError,
    crate::nn::NnError,
    crate::policy::PolicyError,
    std::io::Error,
);

/// Batch Q-learning for functional GUI testing on a synthetic simulator.
#[derive(Debug, Parser)]
#[command(name = "guiq", version, about)]
pub struct Cli {
    /// Configuration file (TOML); omitted fields keep reference defaults.
    #[arg(short, long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for experiment grids (0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect random-policy episodes into an episode file.
    GenData(GenDataArgs),
    /// Train the Q-network (or the tabular baseline) on an episode file.
    Train(TrainArgs),
    /// Run one policy in the simulator and print an evaluation report.
    Eval(EvalArgs),
    /// Cross-validated training; writes learning-curve CSV artifacts.
    Xval(XvalArgs),
    /// Cross-validated training plus a sampler temperature sweep.
    Sweep(SweepArgs),
    /// Exact (and optionally Monte-Carlo) random-policy hitting times.
    Oracle(OracleArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Built-in app name or application file path.
    #[arg(long)]
    pub app: Option<String>,
    /// Objective event; repeat for a merged multi-objective corpus.
    #[arg(long = "objective", value_name = "EVENT")]
    pub objectives: Vec<String>,
    /// Event firings required to complete an episode.
    #[arg(long)]
    pub target_count: Option<u32>,
    /// Qualifying episodes to collect (per objective).
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Per-episode step cap.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output episode file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Episode file produced by gen-data.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Objective event; repeat to train one network on several.
    #[arg(long = "objective", value_name = "EVENT")]
    pub objectives: Vec<String>,
    /// App name/path override; defaults to the episode file's app.
    #[arg(long)]
    pub app: Option<String>,
    /// Fit the tabular Q-hash baseline instead of the network.
    #[arg(long)]
    pub qhash: bool,
    /// Output checkpoint; the metrics CSV and vocabulary are siblings.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    Greedy,
    Sampler,
    Random,
    Qhash,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub policy: PolicyKind,
    /// Softmax temperature (sampler policy only).
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Network checkpoint (greedy and sampler policies).
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Vocabulary file; defaults to the checkpoint's `_vocab.json` sibling.
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Q-hash table file (qhash policy only).
    #[arg(long, value_name = "FILE")]
    pub qtable: Option<PathBuf>,
    #[arg(long)]
    pub app: Option<String>,
    /// Objective event; repeat for multi-objective evaluation.
    #[arg(long = "objective", value_name = "EVENT")]
    pub objectives: Vec<String>,
    /// Simulator steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct XvalArgs {
    /// Episode file produced by gen-data.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// App name/path override; defaults to the episode file's app.
    #[arg(long)]
    pub app: Option<String>,
    /// Objective event; repeat for multi-objective training.
    #[arg(long = "objective", value_name = "EVENT")]
    pub objectives: Vec<String>,
    /// Output directory for CSV artifacts.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Episode file produced by gen-data.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// App name/path override; defaults to the episode file's app.
    #[arg(long)]
    pub app: Option<String>,
    /// Objective event; repeat for multi-objective training.
    #[arg(long = "objective", value_name = "EVENT")]
    pub objectives: Vec<String>,
    /// Output directory for CSV artifacts.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub app: Option<String>,
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub target_count: Option<u32>,
    /// Monte-Carlo episodes cross-checking the exact value (0 = skip).
    #[arg(long, default_value_t = 0)]
    pub mc_episodes: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Step cap per Monte-Carlo episode.
    #[arg(long, default_value_t = 1_000_000)]
    pub cap: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random (tree, batch) instances to verify.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Maximum nodes per random tree.
    #[arg(long, default_value_t = 12)]
    pub max_nodes: usize,
    /// Coordinates probed per parameter block.
    #[arg(long, default_value_t = 6)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum allowed relative error against finite differences.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Process entry point: parse, dispatch, and map failures to exit codes.
pub fn main() -> ExitCode {
    let _ = env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or("warn"),
    )
    .try_init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive here too; they are not errors.
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Execute one parsed invocation against the real environment.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply_env_overrides(std::env::vars())?;
    if let Some(jobs) = cli.jobs {
        config.jobs = jobs;
    }
    if config.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build_global()
        {
            log::warn!("worker pool already initialized: {e}");
        }
    }
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(config, args),
        Command::Train(args) => cmd_train(config, args),
        Command::Eval(args) => cmd_eval(config, args),
        Command::Xval(args) => cmd_xval(config, args),
        Command::Sweep(args) => cmd_sweep(config, args),
        Command::Oracle(args) => cmd_oracle(config, args),
        Command::Gradcheck(args) => cmd_gradcheck(config, args),
    }
}

/// Look up a built-in application or load one from a file path.
fn resolve_app(name: &str) -> Result<AppSpec, CliError> {
    if let Some(spec) = builtin_app(name) {
        return Ok(spec);
    }
    let path = Path::new(name);
    if path.is_file() {
        return Ok(AppSpec::load(path)?);
    }
    Err(CliError::Config(ConfigError::Invalid(format!(
        "unknown app {name:?}: not one of {BUILTIN_APPS:?} and not a file"
    ))))
}

/// `model.ckpt` -> `model_metrics.csv` and friends.
fn sibling(path: &Path, suffix: &str, extension: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("out");
    path.with_file_name(format!("{stem}_{suffix}.{extension}"))
}

/// Write a CSV artifact: fingerprint comment, header, rows.
fn write_csv(
    path: &Path,
    fingerprint: u64,
    header: &str,
    rows: &[String],
) -> Result<(), CliError> {
    let mut text = format!("# config={}\n{header}\n", identifier_hex(fingerprint));
    for row in rows {
        writeln!(text, "{row}").expect("writing to a string cannot fail");
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_gen_data(mut config: RunConfig, args: &GenDataArgs) -> Result<(), CliError> {
    if let Some(app) = &args.app {
        config.app = app.clone();
    }
    if !args.objectives.is_empty() {
        config.objectives = args.objectives.clone();
    }
    if let Some(v) = args.target_count {
        config.target_count = v;
    }
    if let Some(v) = args.episodes {
        config.episodes = v;
    }
    if let Some(v) = args.max_len {
        config.max_episode_len = v;
    }
    if let Some(v) = args.seed {
        config.collect_seed = v;
    }
    config.validate()?;
    let fingerprint = config.fingerprint();

    let spec = resolve_app(&config.app)?;
    let objectives = config.objectives();
    let mut store: Option<EpisodeStore> = None;
    for (index, objective) in objectives.iter().enumerate() {
        // The first objective collects with the configured seed itself;
        // the rest draw from disjoint scrambled streams so merged corpora
        // never repeat episodes.
        let seed = match index {
            0 => config.collect_seed,
            _ => cell_seed(config.collect_seed, index, 0),
        };
        let collect = CollectConfig {
            seed,
            ..config.collect_config()
        };
        let part = collect_random_episodes(&spec, objective, &collect)?;
        match &mut store {
            None => store = Some(part),
            Some(store) => store.merge(part)?,
        }
    }
    let mut store = store.expect("validated configs list at least one objective");
    store.seed = config.collect_seed;
    save_store_tagged(&store, &args.out, Some(fingerprint))?;

    let transitions: usize = store.episodes.iter().map(Episode::len).sum();
    println!("# config={}", identifier_hex(fingerprint));
    println!(
        "collected {} episodes ({} transitions) from {} into {}",
        store.episodes.len(),
        transitions,
        spec.name,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(mut config: RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    let store = load_store(&args.data)?;
    config.app = args.app.clone().unwrap_or_else(|| store.app.clone());
    if !args.objectives.is_empty() {
        config.objectives = args.objectives.clone();
    }
    config.validate()?;
    let fingerprint = config.fingerprint();
    let spec = resolve_app(&config.app)?;
    let objectives = config.objectives();
    println!("# config={}", identifier_hex(fingerprint));

    if args.qhash {
        let mut episodes: Vec<Episode> = Vec::new();
        for objective in &objectives {
            episodes.extend(prepare_episodes(&store, objective, &spec.primary_process())?);
        }
        let table = qhash_fit(
            &episodes,
            config.gamma,
            QHASH_LEARNING_RATE,
            QHASH_PASSES,
            config.collect_seed,
        );
        table.save_tagged(&args.out, Some(fingerprint))?;
        println!(
            "fitted q-hash table: {} entries from {} episodes into {}",
            table.len(),
            episodes.len(),
            args.out.display()
        );
        return Ok(());
    }

    let vocab = build_vocabulary(store.states(), &config.feature_config())?;
    let set = build_training_set(&store, &objectives, &spec.primary_process(), &vocab)?;
    let init_seed = *config.seeds.first().expect("validated seeds are non-empty");
    let mut net = QNetwork::new(vocab.width(), set.action_types.len(), init_seed);
    let eval_cfg = config.eval_config();
    let mut eval_points: Vec<(usize, f64, usize)> = Vec::new();
    let mut hook = |step: usize, net: &QNetwork| {
        let mut agent = GreedyAgent::new(net.clone(), vocab.clone());
        let report = evaluate_policy(&spec, &objectives, &mut agent, &eval_cfg)
            .expect("mid-training evaluation failed");
        eval_points.push((step, report.total_reward, report.unique_states));
    };
    let result = train(&mut net, &set, &config.trainer_config(), Some(&mut hook));

    save_checkpoint_tagged(&net, vocab.fingerprint(), Some(fingerprint), &args.out)?;
    let vocab_path = sibling(&args.out, "vocab", "json");
    write_tagged_json(&vocab_path, &vocab.to_json(), fingerprint)?;
    let metrics_path = sibling(&args.out, "metrics", "csv");
    let rows: Vec<String> = if eval_points.is_empty() {
        result
            .losses
            .iter()
            .map(|&(step, loss)| format!("{step},{loss},,"))
            .collect()
    } else {
        eval_points
            .iter()
            .map(|&(step, reward, unique)| {
                // The final hook step lies one past the last executed
                // training step; report that step's loss.
                let (_, loss) = result.losses[step.min(result.losses.len() - 1)];
                format!("{step},{loss},{reward},{unique}")
            })
            .collect()
    };
    write_csv(
        &metrics_path,
        fingerprint,
        "step,loss,eval_reward,eval_unique_states",
        &rows,
    )?;

    let (_, final_loss) = *result.losses.last().expect("at least one training step");
    println!(
        "trained {} steps on {} transitions ({} distinct states); final loss {final_loss:.6}",
        config.total_steps,
        set.len(),
        set.states.len()
    );
    if let Some(&(_, reward, unique)) = eval_points.last() {
        println!("final greedy evaluation: reward {reward}, unique states {unique}");
    }
    println!(
        "wrote {}, {}, {}",
        args.out.display(),
        vocab_path.display(),
        metrics_path.display()
    );
    Ok(())
}

/// Insert the config fingerprint into a JSON artifact and write it.
fn write_tagged_json(path: &Path, json: &str, fingerprint: u64) -> Result<(), CliError> {
    let mut doc: serde_json::Value =
        serde_json::from_str(json).expect("own artifact JSON parses");
    doc.as_object_mut()
        .expect("artifact is a JSON object")
        .insert(
            "config".to_owned(),
            serde_json::Value::String(identifier_hex(fingerprint)),
        );
    std::fs::write(path, doc.to_string())?;
    Ok(())
}

fn cmd_eval(mut config: RunConfig, args: &EvalArgs) -> Result<(), CliError> {
    if let Some(app) = &args.app {
        config.app = app.clone();
    }
    if !args.objectives.is_empty() {
        config.objectives = args.objectives.clone();
    }
    if let Some(v) = args.steps {
        config.eval_steps = v;
    }
    if let Some(v) = args.seed {
        config.eval_seed = v;
    }
    config.validate()?;
    let fingerprint = config.fingerprint();
    let spec = resolve_app(&config.app)?;
    let objectives = config.objectives();

    let needs_config = |what: &str| {
        CliError::Config(ConfigError::Invalid(format!(
            "{:?} policy needs {what}",
            policy_name(args.policy)
        )))
    };
    let mut agent: Box<dyn Agent> = match args.policy {
        PolicyKind::Random => Box::new(RandomAgent::new(config.eval_seed)),
        PolicyKind::Qhash => {
            let path = args.qtable.as_ref().ok_or_else(|| needs_config("--qtable"))?;
            Box::new(QHashAgent::new(QHashTable::load(path)?))
        }
        PolicyKind::Greedy | PolicyKind::Sampler => {
            let ckpt = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| needs_config("--checkpoint"))?;
            let vocab_path = args
                .vocab
                .clone()
                .unwrap_or_else(|| sibling(ckpt, "vocab", "json"));
            let vocab = Vocabulary::load(&vocab_path)?;
            let (net, _) = load_checkpoint(ckpt, Some(vocab.fingerprint()))?;
            if args.policy == PolicyKind::Greedy {
                Box::new(GreedyAgent::new(net, vocab))
            } else {
                let temperature = args
                    .temperature
                    .ok_or_else(|| needs_config("--temperature"))?;
                if !(temperature > 0.0) {
                    return Err(CliError::Config(ConfigError::Invalid(format!(
                        "temperature must be positive, got {temperature}"
                    ))));
                }
                Box::new(SamplerAgent::new(net, vocab, temperature, config.eval_seed))
            }
        }
    };

    let report = evaluate_policy(&spec, &objectives, agent.as_mut(), &config.eval_config())?;
    println!("# config={}", identifier_hex(fingerprint));
    print_report(&report);
    Ok(())
}

fn policy_name(kind: PolicyKind) -> &'static str {
    match kind {
        PolicyKind::Greedy => "greedy",
        PolicyKind::Sampler => "sampler",
        PolicyKind::Random => "random",
        PolicyKind::Qhash => "qhash",
    }
}

fn print_report(report: &EvalReport) {
    println!("policy = {}", report.policy);
    println!("steps = {}", report.steps);
    println!("seed = {}", report.seed);
    println!("total_reward = {}", report.total_reward);
    println!("episodes_completed = {}", report.episodes_completed);
    println!("unique_states = {}", report.unique_states);
    match report.mean_steps_per_reward() {
        Some(mean) => println!("mean_steps_per_reward = {mean}"),
        None => println!("mean_steps_per_reward = n/a"),
    }
    for (event, count) in &report.per_objective {
        println!("fired[{event}] = {count}");
    }
}

fn cmd_xval(mut config: RunConfig, args: &XvalArgs) -> Result<(), CliError> {
    let store = load_store(&args.data)?;
    config.app = args.app.clone().unwrap_or_else(|| store.app.clone());
    if !args.objectives.is_empty() {
        config.objectives = args.objectives.clone();
    }
    config.validate()?;
    let fingerprint = config.fingerprint();
    let spec = resolve_app(&config.app)?;
    let objectives = config.objectives();
    std::fs::create_dir_all(&args.out)?;

    let report = cross_validate(&spec, &store, &objectives, &config.cross_val_config())?;
    let curve_path = args.out.join("single_task.csv");
    let rows: Vec<String> = report
        .curve
        .iter()
        .map(|p| format!("{},{},{}", p.step, p.mean, p.sd))
        .collect();
    write_csv(&curve_path, fingerprint, "step,reward_mean,reward_sd", &rows)?;

    let baseline = random_baseline(&spec, &objectives, &config.seeds, &config.eval_config())?;
    let baseline_path = args.out.join("single_task_random.csv");
    let rows: Vec<String> = config
        .seeds
        .iter()
        .zip(&baseline)
        .map(|(seed, r)| format!("{seed},{},{}", r.total_reward, r.unique_states))
        .collect();
    write_csv(
        &baseline_path,
        fingerprint,
        "seed,reward,unique_states",
        &rows,
    )?;

    println!("# config={}", identifier_hex(fingerprint));
    let finals = report.final_rewards();
    let (reward_mean, reward_sd) = mean_sd(&finals);
    println!("runs = {}", report.runs.len());
    println!("final_reward = {reward_mean} ± {reward_sd}");
    let steps: Vec<f64> = report
        .runs
        .iter()
        .filter_map(|r| r.report.mean_steps_per_reward())
        .collect();
    if steps.len() == report.runs.len() {
        let (mean, sd) = mean_sd(&steps);
        println!("steps_per_reward = {mean} ± {sd}");
    } else {
        println!(
            "steps_per_reward = n/a ({} of {} runs earned no reward)",
            report.runs.len() - steps.len(),
            report.runs.len()
        );
    }
    let base_rewards: Vec<f64> = baseline.iter().map(|r| r.total_reward).collect();
    let (base_mean, base_sd) = mean_sd(&base_rewards);
    println!("random_reward = {base_mean} ± {base_sd}");
    println!("wrote {}, {}", curve_path.display(), baseline_path.display());
    Ok(())
}

fn cmd_sweep(mut config: RunConfig, args: &SweepArgs) -> Result<(), CliError> {
    let store = load_store(&args.data)?;
    config.app = args.app.clone().unwrap_or_else(|| store.app.clone());
    if !args.objectives.is_empty() {
        config.objectives = args.objectives.clone();
    }
    config.validate()?;
    let fingerprint = config.fingerprint();
    let spec = resolve_app(&config.app)?;
    let objectives = config.objectives();
    std::fs::create_dir_all(&args.out)?;

    let report = cross_validate(&spec, &store, &objectives, &config.cross_val_config())?;
    let sweep = temperature_sweep(&spec, &objectives, &report.runs, &config.sweep_config())?;

    let temperature_path = args.out.join("temperature.csv");
    let rows: Vec<String> = sweep
        .iter()
        .map(|p| format!("{},{},{}", p.temperature, p.reward_mean, p.reward_sd))
        .collect();
    write_csv(
        &temperature_path,
        fingerprint,
        "temperature,reward_mean,reward_sd",
        &rows,
    )?;

    let pages_path = args.out.join("pages_seen.csv");
    let rows: Vec<String> = sweep
        .iter()
        .map(|p| format!("{},{},{}", p.temperature, p.unique_mean, p.unique_sd))
        .collect();
    write_csv(
        &pages_path,
        fingerprint,
        "temperature,unique_mean,unique_sd",
        &rows,
    )?;

    println!("# config={}", identifier_hex(fingerprint));
    for point in &sweep {
        println!(
            "T={}: reward {} ± {}, unique states {} ± {}",
            point.temperature,
            point.reward_mean,
            point.reward_sd,
            point.unique_mean,
            point.unique_sd
        );
    }
    let temps: Vec<f64> = sweep.iter().map(|p| p.temperature).collect();
    let rewards: Vec<f64> = sweep.iter().map(|p| p.reward_mean).collect();
    let uniques: Vec<f64> = sweep.iter().map(|p| p.unique_mean).collect();
    if let Some(rho) = spearman(&temps, &rewards) {
        println!("spearman(temperature, reward) = {rho}");
    }
    if let Some(rho) = spearman(&temps, &uniques) {
        println!("spearman(temperature, unique_states) = {rho}");
    }
    let mut wrote = vec![temperature_path.display().to_string(), pages_path.display().to_string()];

    if objectives.len() >= 2 {
        let multi = multi_task_sweep(&spec, &objectives, &report.runs, &config.sweep_config())?;
        let multi_path = args.out.join("multiplerewards.csv");
        let mut rows = Vec::new();
        for point in &multi {
            for (event, (mean, sd, _)) in &point.per_event {
                rows.push(format!("{},{event},{mean},{sd}", point.temperature));
            }
        }
        write_csv(
            &multi_path,
            fingerprint,
            "temperature,event,count_mean,count_sd",
            &rows,
        )?;
        wrote.push(multi_path.display().to_string());
    }
    println!("wrote {}", wrote.join(", "));
    Ok(())
}

fn cmd_oracle(mut config: RunConfig, args: &OracleArgs) -> Result<(), CliError> {
    if let Some(app) = &args.app {
        config.app = app.clone();
    }
    if let Some(objective) = &args.objective {
        config.objectives = vec![objective.clone()];
    }
    if let Some(v) = args.target_count {
        config.target_count = v;
    }
    if let Some(v) = args.seed {
        config.eval_seed = v;
    }
    config.validate()?;
    let fingerprint = config.fingerprint();
    let spec = resolve_app(&config.app)?;
    let objectives = config.objectives();

    println!("# config={}", identifier_hex(fingerprint));
    println!("app = {}", spec.name);
    for objective in &objectives {
        let exact = expected_hitting_time(&spec, objective)?;
        println!("objective = {}", objective.event_name);
        println!("expected_hitting_time = {exact}");
        if args.mc_episodes > 0 {
            let mc = mc_hitting_time(
                &spec,
                objective,
                args.mc_episodes,
                config.eval_seed,
                args.cap,
            )?;
            println!("mc_hitting_time = {mc} over {} episodes", args.mc_episodes);
            println!("relative_gap = {}", (mc - exact).abs() / exact);
        }
    }
    Ok(())
}

fn cmd_gradcheck(_config: RunConfig, args: &GradcheckArgs) -> Result<(), CliError> {
    if args.instances == 0 || args.max_nodes < 2 || args.samples == 0 {
        return Err(CliError::Config(ConfigError::Invalid(
            "gradcheck needs at least one instance, two nodes, and one sample".to_owned(),
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let num_types = default_action_types().len();
    let mut worst = 0.0f64;
    for instance in 0..args.instances {
        let trees: Vec<UITree> = (0..rng.random_range(1..=3usize))
            .map(|_| random_tree(&mut rng, args.max_nodes))
            .collect();
        // min_count 1 keeps every property value so random trees exercise
        // wide, varied feature rows.
        let vocab = build_vocabulary(
            trees.iter(),
            &FeatureConfig {
                min_count: 1,
                include_automation_id: true,
            },
        )?;
        let vectorized: Vec<(NodeFeatures, EdgeList)> =
            trees.iter().map(|t| vectorize_state(t, &vocab)).collect();
        let mut batch: Vec<QTarget> = Vec::new();
        for (key, (features, edges)) in vectorized.iter().enumerate() {
            for _ in 0..rng.random_range(1..=3usize) {
                batch.push(QTarget {
                    features,
                    edges,
                    state_key: key as u64,
                    action: VectorizedAction {
                        type_index: rng.random_range(0..num_types),
                        node_index: rng.random_range(0..features.num_nodes()),
                        num_types,
                        num_nodes: features.num_nodes(),
                    },
                    target: rng.random_range(-1.0..1.0),
                });
            }
        }
        let mut net = QNetwork::new(vocab.width(), num_types, rng.random());
        let report = gradient_check(&mut net, &batch, args.samples, rng.random(), args.tolerance);
        worst = worst.max(report.max_rel_error);
        if !report.passed {
            return Err(CliError::Pipeline(anyhow::anyhow!(
                "gradient check failed on instance {instance}: max relative error {:e} exceeds {:e}",
                report.max_rel_error,
                args.tolerance
            )));
        }
    }
    println!(
        "gradient check passed: {} instances, max relative error {:e}",
        args.instances, worst
    );
    Ok(())
}

/// A random tree with uniformly chosen parents, a property mix covering
/// actionable and inert nodes, and optional automation ids.
fn random_tree(rng: &mut ChaCha8Rng, max_nodes: usize) -> UITree {
    const CLASSES: [&str; 4] = ["Panel", "ActionButton", "Label", "NavItem"];
    const CONTROLS: [&str; 4] = ["Group", "Button", "Text", "Hyperlink"];
    let n = rng.random_range(2..=max_nodes.max(2));
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 1..n {
        children[rng.random_range(0..i)].push(i);
    }
    // Children always carry a larger index than their parent, so building
    // in reverse index order builds every child before its parent.
    let mut built: Vec<Option<UINode>> = (0..n).map(|_| None).collect();
    for i in (0..n).rev() {
        let automation_id = if rng.random::<f64>() < 0.5 {
            Some(format!("auto{i}"))
        } else {
            None
        };
        let mut node = UINode::leaf(
            automation_id.as_deref(),
            CLASSES[rng.random_range(0..CLASSES.len())],
            CONTROLS[rng.random_range(0..CONTROLS.len())],
            "app.exe",
        );
        node.children = children[i]
            .iter()
            .map(|&c| built[c].take().expect("child already built"))
            .collect();
        built[i] = Some(node);
    }
    UITree::new(built[0].take().expect("root built last"))
}
