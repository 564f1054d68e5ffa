//! Policy evaluation, experiment harnesses, and exact oracles.
//!
//! Besides running trained policies against the simulator, this module
//! carries the analytical machinery the experiments are judged against: an
//! exact expected-hitting-time oracle for the uniform random policy (the
//! screens form a finite Markov chain, so the expectation solves a linear
//! system) and a Monte-Carlo estimator used to cross-check it.

use std::collections::{BTreeMap, HashSet};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{
    build_training_set, k_fold_split, subset_store, DataError, EpisodeStore,
};
use crate::env::{AppSpec, Objective, ScreenId, Simulator};
use crate::featurize::{build_vocabulary, FeatureConfig, FeaturizeError, Vocabulary};
use crate::nn::QNetwork;
use crate::policy::{Agent, GreedyAgent, RandomAgent, SamplerAgent};
use crate::qlearn::{train, TrainResult, TrainerConfig};
use crate::uitree::{
    canonical_state_hash, default_action_types, enumerate_actions, filter_process, UIAction,
};

/// Errors raised by evaluation runs and oracles.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("objective {0:?} is unreachable under the random policy")]
    UnreachableObjective(String),
    #[error("environment error: {0}")]
    Env(#[from] crate::env::EnvError),
    #[error("policy error: {0}")]
    Policy(#[from] crate::policy::PolicyError),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("featurization error: {0}")]
    Featurize(#[from] FeaturizeError),
    #[error("evaluation setup error: {0}")]
    Setup(String),
}

/// Solve `A x = b` by Gaussian elimination with partial pivoting. Returns
/// `None` when the system is singular (pivot below 1e-12).
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot_row][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut sum = b[row];
        for col in row + 1..n {
            sum -= a[row][col] * x[col];
        }
        x[row] = sum / a[row][row];
    }
    Some(x)
}

/// Per-screen uniform-random dynamics extracted from an [`AppSpec`]: for
/// each screen, the number of enumerated actions, how many of them fire the
/// objective event (and where those land), and how many move to each screen
/// without firing. No-op clicks contribute self-loop mass.
struct ChainDynamics {
    screen_ids: Vec<String>,
    action_count: Vec<f64>,
    /// `(screen, target)` -> number of non-firing actions moving there.
    moves: Vec<Vec<f64>>,
    /// `(screen, target)` -> number of firing actions landing there.
    firing_moves: Vec<Vec<f64>>,
}

fn chain_dynamics(spec: &AppSpec, objective: &Objective) -> ChainDynamics {
    let screen_ids: Vec<String> = spec.screens.keys().cloned().collect();
    let index_of = |id: &str| screen_ids.iter().position(|s| s == id).unwrap();
    let n = screen_ids.len();
    let types = default_action_types();
    let mut action_count = vec![0.0; n];
    let mut moves = vec![vec![0.0; n]; n];
    let mut firing_moves = vec![vec![0.0; n]; n];
    for (s, id) in screen_ids.iter().enumerate() {
        let tree = &spec.screens[id];
        let actions = enumerate_actions(tree, &types);
        action_count[s] = actions.len() as f64;
        for action in &actions {
            let key = crate::env::TransitionKey::new(id, action.node_identifier, &action.action_type);
            let target = spec
                .transitions
                .get(&key)
                .map_or(s, |t| index_of(t));
            let fires = spec.events.get(&key) == Some(&objective.event_name);
            if fires {
                firing_moves[s][target] += 1.0;
            } else {
                moves[s][target] += 1.0;
            }
        }
    }
    ChainDynamics {
        screen_ids,
        action_count,
        moves,
        firing_moves,
    }
}

/// Exact expected number of uniform-random steps until the objective fires
/// `target_count` times, starting from the initial screen. The screens form
/// a finite Markov chain whose per-level hitting times solve a linear
/// system; levels (events already fired) are solved from last to first.
pub fn expected_hitting_time(spec: &AppSpec, objective: &Objective) -> Result<f64, EvalError> {
    spec.validate()?;
    let dyn_ = chain_dynamics(spec, objective);
    let n = dyn_.screen_ids.len();
    let initial = dyn_
        .screen_ids
        .iter()
        .position(|s| *s == spec.initial_screen)
        .unwrap();

    // Screens from which a firing action is reachable; if any screen in play
    // falls outside this set the random walk can get stuck forever and the
    // expectation is infinite.
    let mut can_fire: Vec<bool> = (0..n).map(|s| dyn_.firing_moves[s].iter().any(|&c| c > 0.0)).collect();
    loop {
        let mut changed = false;
        for s in 0..n {
            if !can_fire[s]
                && (0..n).any(|t| dyn_.moves[s][t] > 0.0 && can_fire[t])
            {
                can_fire[s] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    if !can_fire[initial] {
        return Err(EvalError::UnreachableObjective(objective.event_name.clone()));
    }
    if !(0..n).all(|s| can_fire[s]) {
        // A reachable trap would make the expectation infinite; detect it.
        let mut reachable = vec![false; n];
        reachable[initial] = true;
        loop {
            let mut changed = false;
            for s in 0..n {
                if reachable[s] {
                    for t in 0..n {
                        if (dyn_.moves[s][t] > 0.0 || dyn_.firing_moves[s][t] > 0.0) && !reachable[t]
                        {
                            reachable[t] = true;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if (0..n).any(|s| reachable[s] && !can_fire[s]) {
            return Err(EvalError::UnreachableObjective(objective.event_name.clone()));
        }
    }

    // E_m[s]: expected remaining steps from screen s with m events already
    // fired. Solve from m = target_count - 1 down to 0.
    let mut next_level: Vec<f64> = vec![0.0; n];
    let target = objective.target_count as usize;
    for level in (0..target).rev() {
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![1.0; n];
        for s in 0..n {
            let k = dyn_.action_count[s];
            a[s][s] += 1.0;
            for t in 0..n {
                if dyn_.moves[s][t] > 0.0 {
                    a[s][t] -= dyn_.moves[s][t] / k;
                }
                if dyn_.firing_moves[s][t] > 0.0 && level + 1 < target {
                    b[s] += dyn_.firing_moves[s][t] / k * next_level[t];
                }
            }
        }
        next_level = solve_linear(a, b).ok_or_else(|| {
            EvalError::UnreachableObjective(objective.event_name.clone())
        })?;
    }
    Ok(next_level[initial])
}

/// Monte-Carlo estimate of the same quantity: run `episodes` uniform-random
/// episodes and average the number of steps until done. `cap` bounds each
/// episode as a safety net; capped episodes contribute `cap` steps, which
/// biases the estimate low, so pick a cap far above the expected value.
pub fn mc_hitting_time(
    spec: &AppSpec,
    objective: &Objective,
    episodes: usize,
    seed: u64,
    cap: usize,
) -> Result<f64, EvalError> {
    let mut sim = Simulator::new(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let types = default_action_types();
    let mut total_steps = 0usize;
    for episode in 0..episodes {
        let mut tree = sim.reset_single(objective, seed.wrapping_add(episode as u64))?;
        for step in 1..=cap {
            let actions = enumerate_actions(&tree, &types);
            let action = &actions[rng.random_range(0..actions.len())];
            let result = sim.step(action)?;
            tree = result.next_state;
            if result.done || step == cap {
                total_steps += step;
                break;
            }
        }
    }
    Ok(total_steps as f64 / episodes as f64)
}

// ---------------------------------------------------------------------------
// Policy evaluation against the simulator.
// ---------------------------------------------------------------------------

/// Budget and determinism of one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Total simulator steps; episodes reset and continue when done.
    pub steps: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            steps: 1000,
            seed: 0,
        }
    }
}

/// Outcome of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub policy: String,
    pub steps: usize,
    pub seed: u64,
    /// Sum of normalized rewards (each firing of an objective's event
    /// contributes that objective's `r_norm`).
    pub total_reward: f64,
    /// Raw firing counts per objective event.
    pub per_objective: BTreeMap<String, u32>,
    pub episodes_completed: usize,
    /// Step gaps between consecutive reward-bearing steps.
    pub steps_per_reward: Vec<usize>,
    /// Distinct states (by canonical hash) seen, initial states included.
    pub unique_states: usize,
}

impl EvalReport {
    pub fn mean_steps_per_reward(&self) -> Option<f64> {
        if self.steps_per_reward.is_empty() {
            return None;
        }
        Some(
            self.steps_per_reward.iter().sum::<usize>() as f64
                / self.steps_per_reward.len() as f64,
        )
    }
}

/// Drive an agent against the simulator for a fixed number of steps,
/// resetting whenever an episode completes. The agent sees states filtered
/// to the application's own process, exactly as during training.
pub fn evaluate_policy(
    spec: &AppSpec,
    objectives: &[Objective],
    agent: &mut dyn Agent,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if objectives.is_empty() {
        return Err(EvalError::Setup("evaluation needs at least one objective".to_owned()));
    }
    let mut sim = Simulator::new(spec.clone())?;
    let process = spec.primary_process();
    let r_norm_of: BTreeMap<&str, f64> = objectives
        .iter()
        .map(|o| (o.event_name.as_str(), o.r_norm()))
        .collect();

    let mut report = EvalReport {
        policy: agent.label().to_owned(),
        steps: config.steps,
        seed: config.seed,
        total_reward: 0.0,
        per_objective: objectives
            .iter()
            .map(|o| (o.event_name.clone(), 0))
            .collect(),
        episodes_completed: 0,
        steps_per_reward: Vec::new(),
        unique_states: 0,
    };
    let mut seen: HashSet<u64> = HashSet::new();
    let tree = sim.reset(objectives, config.seed)?;
    let mut filtered = filter_process(&tree, &process);
    seen.insert(canonical_state_hash(&filtered));
    let mut last_reward_step = 0usize;
    for step in 1..=config.steps {
        let action = agent.select(&filtered)?;
        let result = sim.step(&action)?;
        let mut step_reward = 0.0;
        for event in &result.fired_events {
            if let Some(r_norm) = r_norm_of.get(event.as_str()) {
                *report.per_objective.get_mut(event).expect("objective key") += 1;
                step_reward += r_norm;
            }
        }
        if step_reward > 0.0 {
            report.total_reward += step_reward;
            report.steps_per_reward.push(step - last_reward_step);
            last_reward_step = step;
        }
        let tree = if result.done {
            report.episodes_completed += 1;
            sim.reset(
                objectives,
                config.seed.wrapping_add(report.episodes_completed as u64),
            )?
        } else {
            result.next_state
        };
        filtered = filter_process(&tree, &process);
        seen.insert(canonical_state_hash(&filtered));
    }
    report.unique_states = seen.len();
    Ok(report)
}

/// Evaluate the uniform random baseline once per seed.
pub fn random_baseline(
    spec: &AppSpec,
    objectives: &[Objective],
    seeds: &[u64],
    config: &EvalConfig,
) -> Result<Vec<EvalReport>, EvalError> {
    seeds
        .iter()
        .map(|&seed| {
            let mut agent = RandomAgent::new(cell_seed(config.seed, 0, seed));
            evaluate_policy(
                spec,
                objectives,
                &mut agent,
                &EvalConfig {
                    seed,
                    ..config.clone()
                },
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Exact optimal policy of the screen-level decision process.
// ---------------------------------------------------------------------------

/// Optimal state values and Q-values of the screen-level process under a
/// discount, with the objective's full target count remaining.
#[derive(Debug, Clone)]
pub struct OptimalPolicy {
    pub values: BTreeMap<ScreenId, f64>,
    pub q_values: BTreeMap<ScreenId, Vec<(UIAction, f64)>>,
    /// All actions within `1e-9` of each screen's maximum.
    pub best_actions: BTreeMap<ScreenId, Vec<UIAction>>,
}

/// Value iteration on the exact screen dynamics. Transitions are
/// deterministic, so each level (number of firings still required)
/// contracts at rate `gamma` and converges quickly; levels are solved from
/// the last firing backwards, exactly like the hitting-time oracle.
pub fn value_iteration(
    spec: &AppSpec,
    objective: &Objective,
    gamma: f64,
) -> Result<OptimalPolicy, EvalError> {
    spec.validate()?;
    if !spec.events.values().any(|e| *e == objective.event_name) {
        return Err(EvalError::UnreachableObjective(objective.event_name.clone()));
    }
    let screen_ids: Vec<ScreenId> = spec.screens.keys().cloned().collect();
    let index_of = |id: &str| screen_ids.iter().position(|s| s == id).unwrap();
    let n = screen_ids.len();
    let types = default_action_types();
    // Per screen: (action, successor index, fires the objective).
    let mut acts: Vec<Vec<(UIAction, usize, bool)>> = Vec::with_capacity(n);
    for (s, id) in screen_ids.iter().enumerate() {
        let tree = &spec.screens[id];
        let mut list = Vec::new();
        for action in enumerate_actions(tree, &types) {
            let key =
                crate::env::TransitionKey::new(id, action.node_identifier, &action.action_type);
            let target = spec.transitions.get(&key).map_or(s, |t| index_of(t));
            let fires = spec.events.get(&key) == Some(&objective.event_name);
            list.push((action, target, fires));
        }
        acts.push(list);
    }

    let r_norm = objective.r_norm();
    // Converge one level: `v_next` holds the values one firing further
    // along (unused on the last level, where a firing ends the episode).
    let solve_level = |v_next: &[f64], last_level: bool| -> Vec<f64> {
        let mut v = vec![0.0; n];
        for _ in 0..10_000 {
            let new_v: Vec<f64> = (0..n)
                .map(|s| {
                    acts[s]
                        .iter()
                        .map(|&(_, target, fires)| {
                            if fires {
                                r_norm + gamma * if last_level { 0.0 } else { v_next[target] }
                            } else {
                                gamma * v[target]
                            }
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let delta = (0..n).map(|s| (new_v[s] - v[s]).abs()).fold(0.0, f64::max);
            v = new_v;
            if delta < 1e-13 {
                break;
            }
        }
        v
    };
    // Levels indexed by firings still required, solved bottom-up.
    let mut levels: Vec<Vec<f64>> = Vec::new();
    for m in 1..=objective.target_count as usize {
        let v_next: &[f64] = if m == 1 { &[] } else { &levels[m - 2] };
        levels.push(solve_level(v_next, m == 1));
    }
    let v = levels.last().expect("target_count >= 1").clone();
    let last_level = objective.target_count == 1;
    let v_prev_level: Vec<f64> = if last_level {
        vec![0.0; n]
    } else {
        levels[objective.target_count as usize - 2].clone()
    };

    let mut values = BTreeMap::new();
    let mut q_values = BTreeMap::new();
    let mut best_actions = BTreeMap::new();
    for (s, id) in screen_ids.iter().enumerate() {
        values.insert(id.clone(), v[s]);
        let qs: Vec<(UIAction, f64)> = acts[s]
            .iter()
            .map(|(action, target, fires)| {
                let q = if *fires {
                    let c = if last_level { 0.0 } else { v_prev_level[*target] };
                    r_norm + gamma * c
                } else {
                    gamma * v[*target]
                };
                (action.clone(), q)
            })
            .collect();
        let max = qs.iter().map(|(_, q)| *q).fold(f64::NEG_INFINITY, f64::max);
        best_actions.insert(
            id.clone(),
            qs.iter()
                .filter(|(_, q)| (max - q).abs() < 1e-9)
                .map(|(a, _)| a.clone())
                .collect(),
        );
        q_values.insert(id.clone(), qs);
    }
    Ok(OptimalPolicy {
        values,
        q_values,
        best_actions,
    })
}

// ---------------------------------------------------------------------------
// Statistics helpers.
// ---------------------------------------------------------------------------

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Spearman rank correlation with average ranks on ties. `None` when fewer
/// than two points or either side has zero rank variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && vals[order[j + 1]] == vals[order[i]] {
                j += 1;
            }
            // Average rank over the tie group (ranks are 1-based).
            let avg = (i + 1 + j + 1) as f64 / 2.0;
            for &slot in &order[i..=j] {
                ranks[slot] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let (mx, _) = mean_sd(&rx);
    let (my, _) = mean_sd(&ry);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in rx.iter().zip(&ry) {
        cov += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Deterministic per-cell seed derivation so parallel experiment cells
/// never share rng streams.
pub fn cell_seed(base: u64, fold: usize, seed: u64) -> u64 {
    base ^ (fold as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (seed + 1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

// ---------------------------------------------------------------------------
// Cross-validated training runs.
// ---------------------------------------------------------------------------

/// A trained network together with the vocabulary it was trained against.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: QNetwork,
    pub vocab: Vocabulary,
}

/// Train a network on a store: build the vocabulary from the store's own
/// states, assemble the training set for the objectives, and run the
/// training loop. `init_seed` seeds the network initialization.
pub fn train_on_store(
    spec: &AppSpec,
    store: &EpisodeStore,
    objectives: &[Objective],
    feature: &FeatureConfig,
    trainer: &TrainerConfig,
    init_seed: u64,
    eval_hook: Option<&mut dyn FnMut(usize, &QNetwork)>,
) -> Result<(TrainedModel, TrainResult), EvalError> {
    let vocab = build_vocabulary(store.states(), feature)?;
    let set = build_training_set(store, objectives, &spec.primary_process(), &vocab)?;
    let mut net = QNetwork::new(vocab.width(), set.action_types.len(), init_seed);
    let result = train(&mut net, &set, trainer, eval_hook);
    Ok((TrainedModel { net, vocab }, result))
}

/// Configuration of a cross-validated experiment: `folds x seeds` training
/// runs, each evaluated greedily, with a learning curve recorded at the
/// trainer's evaluation cadence.
#[derive(Debug, Clone)]
pub struct CrossValConfig {
    pub folds: usize,
    /// Network-initialization seeds; one run per (fold, seed).
    pub seeds: Vec<u64>,
    pub split_seed: u64,
    pub feature: FeatureConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

impl Default for CrossValConfig {
    fn default() -> Self {
        CrossValConfig {
            folds: 5,
            seeds: vec![0, 1, 2, 3],
            split_seed: 0,
            feature: FeatureConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// One (fold, seed) cell of a cross-validated experiment.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub fold: usize,
    pub seed: u64,
    pub model: TrainedModel,
    pub train_result: TrainResult,
    /// Final greedy evaluation.
    pub report: EvalReport,
    /// Greedy total reward at each recorded training step.
    pub curve: Vec<(usize, f64)>,
}

/// Mean/sd of the greedy learning curves across runs at one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Aggregated outcome of [`cross_validate`].
#[derive(Debug, Clone)]
pub struct CrossValReport {
    pub runs: Vec<RunRecord>,
    pub curve: Vec<CurvePoint>,
}

impl CrossValReport {
    /// Final greedy rewards per run, in (fold, seed) order.
    pub fn final_rewards(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.report.total_reward).collect()
    }
}

/// Train and evaluate every (fold, seed) cell, in parallel, and aggregate
/// the greedy learning curves. Each cell trains on its fold's training
/// episodes only — including its own vocabulary — and is fully
/// deterministic in the configuration, independent of scheduling order.
pub fn cross_validate(
    spec: &AppSpec,
    store: &EpisodeStore,
    objectives: &[Objective],
    config: &CrossValConfig,
) -> Result<CrossValReport, EvalError> {
    let folds = k_fold_split(store, config.folds, config.split_seed)?;
    let mut cells: Vec<(usize, u64)> = Vec::new();
    for fold in 0..config.folds {
        for &seed in &config.seeds {
            cells.push((fold, seed));
        }
    }
    let runs: Result<Vec<RunRecord>, EvalError> = cells
        .par_iter()
        .map(|&(fold, seed)| {
            let train_store = subset_store(store, &folds[fold].train);
            let trainer = TrainerConfig {
                seed: cell_seed(config.trainer.seed, fold, seed),
                ..config.trainer.clone()
            };
            let eval = EvalConfig {
                seed: cell_seed(config.eval.seed, fold, seed),
                ..config.eval.clone()
            };
            let mut curve: Vec<(usize, f64)> = Vec::new();
            let (model, train_result) = {
                // The hook needs the vocabulary before training finishes, so
                // build it here and reuse it for the final model.
                let vocab = build_vocabulary(train_store.states(), &config.feature)?;
                let set = build_training_set(
                    &train_store,
                    objectives,
                    &spec.primary_process(),
                    &vocab,
                )?;
                let mut net = QNetwork::new(vocab.width(), set.action_types.len(), seed);
                let mut hook = |step: usize, net: &QNetwork| {
                    let mut agent = GreedyAgent::new(net.clone(), vocab.clone());
                    let report = evaluate_policy(spec, objectives, &mut agent, &eval)
                        .expect("curve evaluation failed");
                    curve.push((step, report.total_reward));
                };
                let result = train(&mut net, &set, &trainer, Some(&mut hook));
                (TrainedModel { net, vocab }, result)
            };
            let mut agent = GreedyAgent::new(model.net.clone(), model.vocab.clone());
            let report = evaluate_policy(spec, objectives, &mut agent, &eval)?;
            Ok(RunRecord {
                fold,
                seed,
                model,
                train_result,
                report,
                curve,
            })
        })
        .collect();
    let mut runs = runs?;
    runs.sort_by_key(|r| (r.fold, r.seed));
    let curve = aggregate_curves(&runs)?;
    Ok(CrossValReport { runs, curve })
}

/// Combine per-run learning curves into per-step mean/sd. All runs must
/// share the same step axis.
pub fn aggregate_curves(runs: &[RunRecord]) -> Result<Vec<CurvePoint>, EvalError> {
    let Some(first) = runs.first() else {
        return Ok(Vec::new());
    };
    let steps: Vec<usize> = first.curve.iter().map(|(s, _)| *s).collect();
    for run in runs {
        let axis: Vec<usize> = run.curve.iter().map(|(s, _)| *s).collect();
        if axis != steps {
            return Err(EvalError::Setup(
                "learning curves have mismatched step axes".to_owned(),
            ));
        }
    }
    Ok(steps
        .iter()
        .enumerate()
        .map(|(i, &step)| {
            let values: Vec<f64> = runs.iter().map(|r| r.curve[i].1).collect();
            let (mean, sd) = mean_sd(&values);
            CurvePoint { step, mean, sd }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Temperature sweeps.
// ---------------------------------------------------------------------------

/// Sweep evaluation settings: which temperatures to run the sampling
/// policy at, under which evaluation budget.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub temperatures: Vec<f64>,
    pub eval: EvalConfig,
}

/// Aggregates of one temperature across all runs (in (fold, seed) order).
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub temperature: f64,
    pub reward_mean: f64,
    pub reward_sd: f64,
    pub unique_mean: f64,
    pub unique_sd: f64,
    pub rewards: Vec<f64>,
    pub uniques: Vec<f64>,
}

/// Aggregates of one temperature in a multi-objective evaluation.
#[derive(Debug, Clone)]
pub struct MultiTaskPoint {
    pub temperature: f64,
    pub total_mean: f64,
    pub total_sd: f64,
    pub totals: Vec<f64>,
    /// Per objective event: (mean, sd, raw counts per run).
    pub per_event: BTreeMap<String, (f64, f64, Vec<f64>)>,
}

/// Evaluate every trained run at every temperature. Cells run in parallel
/// and are seeded per (temperature, run) so results are deterministic and
/// scheduling-independent.
fn sampler_grid(
    spec: &AppSpec,
    objectives: &[Objective],
    runs: &[RunRecord],
    config: &SweepConfig,
) -> Result<Vec<Vec<EvalReport>>, EvalError> {
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for ti in 0..config.temperatures.len() {
        for ri in 0..runs.len() {
            cells.push((ti, ri));
        }
    }
    let reports: Result<Vec<((usize, usize), EvalReport)>, EvalError> = cells
        .par_iter()
        .map(|&(ti, ri)| {
            let run = &runs[ri];
            let temperature = config.temperatures[ti];
            let base = cell_seed(config.eval.seed, run.fold, run.seed);
            let seed = base ^ (ti as u64 + 1).wrapping_mul(0x94d0_49bb_1331_11eb);
            let mut agent = SamplerAgent::new(
                run.model.net.clone(),
                run.model.vocab.clone(),
                temperature,
                seed,
            );
            let report = evaluate_policy(
                spec,
                objectives,
                &mut agent,
                &EvalConfig {
                    seed,
                    ..config.eval.clone()
                },
            )?;
            Ok(((ti, ri), report))
        })
        .collect();
    let mut grid: Vec<Vec<Option<EvalReport>>> =
        vec![vec![None; runs.len()]; config.temperatures.len()];
    for ((ti, ri), report) in reports? {
        grid[ti][ri] = Some(report);
    }
    Ok(grid
        .into_iter()
        .map(|row| row.into_iter().map(|r| r.expect("cell computed")).collect())
        .collect())
}

/// Single-objective sweep: reward and state-coverage statistics per
/// temperature.
pub fn temperature_sweep(
    spec: &AppSpec,
    objectives: &[Objective],
    runs: &[RunRecord],
    config: &SweepConfig,
) -> Result<Vec<SweepPoint>, EvalError> {
    let grid = sampler_grid(spec, objectives, runs, config)?;
    Ok(config
        .temperatures
        .iter()
        .zip(grid)
        .map(|(&temperature, reports)| {
            let rewards: Vec<f64> = reports.iter().map(|r| r.total_reward).collect();
            let uniques: Vec<f64> = reports.iter().map(|r| r.unique_states as f64).collect();
            let (reward_mean, reward_sd) = mean_sd(&rewards);
            let (unique_mean, unique_sd) = mean_sd(&uniques);
            SweepPoint {
                temperature,
                reward_mean,
                reward_sd,
                unique_mean,
                unique_sd,
                rewards,
                uniques,
            }
        })
        .collect())
}

/// Multi-objective sweep: total and per-event statistics per temperature.
pub fn multi_task_sweep(
    spec: &AppSpec,
    objectives: &[Objective],
    runs: &[RunRecord],
    config: &SweepConfig,
) -> Result<Vec<MultiTaskPoint>, EvalError> {
    let grid = sampler_grid(spec, objectives, runs, config)?;
    Ok(config
        .temperatures
        .iter()
        .zip(grid)
        .map(|(&temperature, reports)| {
            let totals: Vec<f64> = reports.iter().map(|r| r.total_reward).collect();
            let (total_mean, total_sd) = mean_sd(&totals);
            let mut per_event = BTreeMap::new();
            for objective in objectives {
                let counts: Vec<f64> = reports
                    .iter()
                    .map(|r| r.per_objective[&objective.event_name] as f64)
                    .collect();
                let (mean, sd) = mean_sd(&counts);
                per_event.insert(objective.event_name.clone(), (mean, sd, counts));
            }
            MultiTaskPoint {
                temperature,
                total_mean,
                total_sd,
                totals,
                per_event,
            }
        })
        .collect())
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect_random_episodes, CollectConfig};
    use crate::env::{settings_spec, EVENT_BLUETOOTH, EVENT_NOTIFICATIONS};
    use crate::policy::PolicyError;
    use crate::uitree::UITree;

    /// Test agent that replays the oracle's best action per screen, keyed
    /// by the canonical hash of the filtered screen.
    struct OracleAgent {
        by_hash: std::collections::HashMap<u64, UIAction>,
    }

    impl OracleAgent {
        fn for_task(spec: &AppSpec, objective: &Objective) -> OracleAgent {
            let optimal = value_iteration(spec, objective, 0.1).unwrap();
            let process = spec.primary_process();
            let by_hash = spec
                .screens
                .iter()
                .map(|(id, tree)| {
                    let hash = canonical_state_hash(&filter_process(tree, &process));
                    (hash, optimal.best_actions[id][0].clone())
                })
                .collect();
            OracleAgent { by_hash }
        }
    }

    impl Agent for OracleAgent {
        fn select(&mut self, tree: &UITree) -> Result<UIAction, PolicyError> {
            Ok(self.by_hash[&canonical_state_hash(tree)].clone())
        }

        fn label(&self) -> &str {
            "oracle"
        }
    }

    fn small_corpus(episodes: usize, seed: u64) -> EpisodeStore {
        collect_random_episodes(
            &settings_spec(),
            &Objective::new(EVENT_NOTIFICATIONS),
            &CollectConfig::new(episodes, 1000, seed),
        )
        .unwrap()
    }

    #[test]
    fn zero_step_evaluation_sees_only_the_initial_state() {
        let spec = settings_spec();
        let mut agent = RandomAgent::new(0);
        let report = evaluate_policy(
            &spec,
            &[Objective::new(EVENT_NOTIFICATIONS)],
            &mut agent,
            &EvalConfig { steps: 0, seed: 0 },
        )
        .unwrap();
        assert_eq!(report.unique_states, 1);
        assert_eq!(report.total_reward, 0.0);
        assert!(report.steps_per_reward.is_empty());
        assert_eq!(report.episodes_completed, 0);
    }

    #[test]
    fn random_agent_reaches_the_objective_within_budget() {
        let spec = settings_spec();
        let mut agent = RandomAgent::new(3);
        let report = evaluate_policy(
            &spec,
            &[Objective::new(EVENT_NOTIFICATIONS)],
            &mut agent,
            &EvalConfig {
                steps: 3000,
                seed: 1,
            },
        )
        .unwrap();
        // The expected hitting time is a few hundred steps, so 3000 steps
        // should complete several episodes.
        assert!(report.total_reward >= 1.0, "got {}", report.total_reward);
        assert_eq!(report.episodes_completed as f64, report.total_reward);
        assert_eq!(
            report.per_objective[EVENT_NOTIFICATIONS] as f64,
            report.total_reward
        );
        // Visited states are screens of the app, so coverage is bounded.
        assert!(report.unique_states <= spec.screens.len());
        assert!(report.unique_states >= 3);
        let gaps: usize = report.steps_per_reward.iter().sum();
        assert!(gaps <= report.steps);
    }

    #[test]
    fn oracle_policy_needs_exactly_two_steps_per_reward() {
        let spec = settings_spec();
        for event in [EVENT_NOTIFICATIONS, EVENT_BLUETOOTH] {
            let objective = Objective::new(event);
            let mut agent = OracleAgent::for_task(&spec, &objective);
            let report = evaluate_policy(
                &spec,
                &[objective],
                &mut agent,
                &EvalConfig {
                    steps: 100,
                    seed: 0,
                },
            )
            .unwrap();
            assert_eq!(report.total_reward, 50.0, "{event}");
            assert!(report.steps_per_reward.iter().all(|&g| g == 2));
            assert_eq!(report.mean_steps_per_reward(), Some(2.0));
        }
    }

    #[test]
    fn value_iteration_matches_hand_solved_chain() {
        // Reuse the oracle test chain: 4 buttons then 6 buttons, one
        // advancing and one firing. With gamma = 0.1 the optimal values are
        // V(second) = 1 and V(first) = 0.1, and the best actions are the
        // advancing and firing clicks.
        let (spec, objective) = super::oracle_tests::chain_spec(4, 6);
        let optimal = value_iteration(&spec, &objective, 0.1).unwrap();
        assert!((optimal.values["second"] - 1.0).abs() < 1e-12);
        assert!((optimal.values["first"] - 0.1).abs() < 1e-12);
        assert_eq!(optimal.best_actions["first"].len(), 1);
        assert_eq!(optimal.best_actions["second"].len(), 1);
        // The best first-screen action is the one with a transition entry.
        let advance = optimal.best_actions["first"][0].clone();
        let key = crate::env::TransitionKey::new("first", advance.node_identifier, "LeftClick");
        assert!(spec.transitions.contains_key(&key));
        // Q-values: firing action 1.0; self-loops on second are gamma * 1.
        let second_q = &optimal.q_values["second"];
        let max = second_q.iter().map(|(_, q)| *q).fold(f64::NEG_INFINITY, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        let loops = second_q.iter().filter(|(_, q)| (q - 0.1).abs() < 1e-12).count();
        assert_eq!(loops, 5, "five non-firing buttons self-loop");
    }

    #[test]
    fn value_iteration_handles_higher_target_counts() {
        // On the one-screen spec with k buttons, requiring two firings
        // means Q(fire) at the top level is r_norm + gamma * V_1, with
        // r_norm = 1/2 and V_1 = r_norm (the last firing is immediate).
        let (spec, _) = super::oracle_tests::one_screen_spec(5);
        let objective = Objective::with_target("goal", 2);
        let optimal = value_iteration(&spec, &objective, 0.1).unwrap();
        let expected = 0.5 + 0.1 * 0.5;
        assert!((optimal.values["only"] - expected).abs() < 1e-12);
    }

    #[test]
    fn spearman_matches_hand_computed_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 0.0, -5.0]), Some(-1.0));
        // Ties on both sides still rank-correlate perfectly.
        assert_eq!(
            spearman(&[1.0, 2.0, 2.0, 3.0], &[10.0, 20.0, 20.0, 40.0]),
            Some(1.0)
        );
        // Hand-computed mixed case: ranks (1,2,3,4) vs (2,1,4,3) -> 0.6.
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((r - 0.6).abs() < 1e-12);
        // Degenerate inputs.
        assert_eq!(spearman(&[1.0], &[2.0]), None);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn mean_sd_uses_sample_variance() {
        let (m, s) = mean_sd(&[2.0, 2.0, 2.0]);
        assert_eq!((m, s), (2.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_sd(&[5.0]), (5.0, 0.0));
        assert_eq!(mean_sd(&[]), (0.0, 0.0));
    }

    #[test]
    fn curve_aggregation_averages_aligned_runs() {
        let template = |curve: Vec<(usize, f64)>| RunRecord {
            fold: 0,
            seed: 0,
            model: TrainedModel {
                net: QNetwork::with_shape(4, 1, 2, 1, 0),
                vocab: test_vocab(),
            },
            train_result: TrainResult {
                losses: vec![],
                syncs: vec![],
            },
            report: empty_report(),
            curve,
        };
        let runs = vec![
            template(vec![(0, 0.0), (10, 4.0)]),
            template(vec![(0, 0.0), (10, 6.0)]),
        ];
        let curve = aggregate_curves(&runs).unwrap();
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[1].step, 10);
        assert_eq!(curve[1].mean, 5.0);
        assert!((curve[1].sd - std::f64::consts::SQRT_2).abs() < 1e-12);

        let bad = vec![template(vec![(0, 0.0)]), template(vec![(5, 0.0)])];
        assert!(matches!(aggregate_curves(&bad), Err(EvalError::Setup(_))));
    }

    fn test_vocab() -> Vocabulary {
        let spec = settings_spec();
        let tree = spec.screens.get(&spec.initial_screen).unwrap();
        build_vocabulary([tree], &FeatureConfig::default()).unwrap()
    }

    fn empty_report() -> EvalReport {
        EvalReport {
            policy: "test".to_owned(),
            steps: 0,
            seed: 0,
            total_reward: 0.0,
            per_objective: BTreeMap::new(),
            episodes_completed: 0,
            steps_per_reward: vec![],
            unique_states: 0,
        }
    }

    #[test]
    fn cross_validation_is_deterministic_and_well_shaped() {
        let spec = settings_spec();
        let store = small_corpus(4, 41);
        let objectives = [Objective::new(EVENT_NOTIFICATIONS)];
        let config = CrossValConfig {
            folds: 2,
            seeds: vec![0],
            trainer: TrainerConfig {
                total_steps: 30,
                eval_every: 15,
                ..TrainerConfig::default()
            },
            eval: EvalConfig {
                steps: 60,
                seed: 0,
            },
            ..CrossValConfig::default()
        };
        let report = cross_validate(&spec, &store, &objectives, &config).unwrap();
        assert_eq!(report.runs.len(), 2);
        assert_eq!(report.runs[0].fold, 0);
        assert_eq!(report.runs[1].fold, 1);
        // Curve points at steps 0, 15, and the final step 30.
        assert_eq!(
            report.curve.iter().map(|p| p.step).collect::<Vec<_>>(),
            vec![0, 15, 30]
        );
        assert_eq!(report.final_rewards().len(), 2);

        let again = cross_validate(&spec, &store, &objectives, &config).unwrap();
        assert_eq!(report.final_rewards(), again.final_rewards());
        assert_eq!(report.curve, again.curve);
    }

    #[test]
    fn sweeps_are_deterministic_and_cover_the_grid() {
        let spec = settings_spec();
        let store = small_corpus(4, 41);
        let objectives = [Objective::new(EVENT_NOTIFICATIONS)];
        let xval = CrossValConfig {
            folds: 2,
            seeds: vec![0],
            trainer: TrainerConfig {
                total_steps: 20,
                eval_every: 0,
                ..TrainerConfig::default()
            },
            eval: EvalConfig {
                steps: 40,
                seed: 0,
            },
            ..CrossValConfig::default()
        };
        let runs = cross_validate(&spec, &store, &objectives, &xval).unwrap().runs;
        let sweep_config = SweepConfig {
            temperatures: vec![f64::INFINITY, 0.01],
            eval: EvalConfig {
                steps: 40,
                seed: 7,
            },
        };
        let points = temperature_sweep(&spec, &objectives, &runs, &sweep_config).unwrap();
        assert_eq!(points.len(), 2);
        for point in &points {
            assert_eq!(point.rewards.len(), 2);
            assert_eq!(point.uniques.len(), 2);
            assert!(point.unique_mean >= 1.0);
        }
        let again = temperature_sweep(&spec, &objectives, &runs, &sweep_config).unwrap();
        assert_eq!(points[0].rewards, again[0].rewards);
        assert_eq!(points[1].uniques, again[1].uniques);
    }

    #[test]
    fn multi_task_sweep_reports_each_objective() {
        let spec = settings_spec();
        let mut store = small_corpus(3, 41);
        store
            .merge(collect_random_episodes(
                &spec,
                &Objective::new(EVENT_BLUETOOTH),
                &CollectConfig::new(3, 1000, 43),
            )
            .unwrap())
            .unwrap();
        let objectives = [
            Objective::new(EVENT_NOTIFICATIONS),
            Objective::new(EVENT_BLUETOOTH),
        ];
        let xval = CrossValConfig {
            folds: 2,
            seeds: vec![0],
            trainer: TrainerConfig {
                total_steps: 20,
                eval_every: 0,
                ..TrainerConfig::default()
            },
            eval: EvalConfig {
                steps: 40,
                seed: 0,
            },
            ..CrossValConfig::default()
        };
        let runs = cross_validate(&spec, &store, &objectives, &xval).unwrap().runs;
        let points = multi_task_sweep(
            &spec,
            &objectives,
            &runs,
            &SweepConfig {
                temperatures: vec![0.1],
                eval: EvalConfig {
                    steps: 40,
                    seed: 3,
                },
            },
        )
        .unwrap();
        assert_eq!(points.len(), 1);
        let point = &points[0];
        assert_eq!(point.per_event.len(), 2);
        assert!(point.per_event.contains_key(EVENT_NOTIFICATIONS));
        assert!(point.per_event.contains_key(EVENT_BLUETOOTH));
        assert_eq!(point.totals.len(), 2);
    }

    #[test]
    fn random_baseline_runs_one_report_per_seed() {
        let spec = settings_spec();
        let reports = random_baseline(
            &spec,
            &[Objective::new(EVENT_NOTIFICATIONS)],
            &[0, 1, 2],
            &EvalConfig {
                steps: 50,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(reports.len(), 3);
        assert!(reports.iter().all(|r| r.policy == "random"));
        // Different seeds drive different rngs; state coverage rarely ties
        // across three runs, but total reward can. Just require the runs to
        // be non-identical as a whole.
        let fingerprints: Vec<(usize, usize)> = reports
            .iter()
            .map(|r| (r.unique_states, r.steps_per_reward.len()))
            .collect();
        assert!(
            fingerprints.windows(2).any(|w| w[0] != w[1])
                || reports[0].total_reward != reports[1].total_reward
        );
    }
}
