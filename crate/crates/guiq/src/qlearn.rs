//! Batch Q-learning over a fixed training set.
//!
//! Training never touches the simulator: it replays the stored transitions
//! as supervised regression onto temporal-difference targets. A frozen
//! copy of the network (the target network) supplies the bootstrap term
//! and is refreshed every [`TrainerConfig::target_update`] steps, which
//! keeps the regression targets stationary between refreshes. Batches are
//! drawn by shuffling the transition indices once per epoch and slicing
//! them off in order, so every transition is visited once per pass.

use log::warn;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::TrainingSet;
use crate::nn::{AdamConfig, AdamState, QNetwork, QTarget};

/// Q-learning hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    /// Discount factor.
    pub gamma: f64,
    /// Steps between target-network refreshes.
    pub target_update: usize,
    /// Minibatch size (the trailing batch of an epoch may be smaller).
    pub batch_size: usize,
    /// Adam learning rate.
    pub learning_rate: f64,
    /// Total gradient steps.
    pub total_steps: usize,
    /// Evaluation-hook cadence in steps; 0 disables the hook.
    pub eval_every: usize,
    /// Seed for batch shuffling.
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            gamma: 0.1,
            target_update: 100,
            batch_size: 128,
            learning_rate: 1e-2,
            total_steps: 400,
            eval_every: 10,
            seed: 0,
        }
    }
}

/// Loss trace of a training run. `losses` holds `(step, batch loss)` per
/// gradient step; `syncs` lists the steps at which the target network was
/// refreshed.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub losses: Vec<(usize, f64)>,
    pub syncs: Vec<usize>,
}

/// Temporal-difference targets `r + gamma * max_a' Q_target(s', a')` for
/// the given transition indices, with the bootstrap term dropped on
/// terminal transitions. Each distinct next state is forwarded through the
/// target network once.
pub fn td_targets(
    target_net: &QNetwork,
    set: &TrainingSet,
    batch: &[usize],
    gamma: f64,
) -> Vec<f64> {
    let mut max_next: std::collections::HashMap<usize, f64> = std::collections::HashMap::new();
    batch
        .iter()
        .map(|&index| {
            let t = &set.transitions[index];
            if t.done {
                return t.reward;
            }
            let bootstrap = *max_next.entry(t.next_state).or_insert_with(|| {
                let state = &set.states[t.next_state];
                if state.actions.is_empty() {
                    warn!(
                        "next state {:016x} offers no actions; bootstrapping with 0",
                        state.hash
                    );
                    return 0.0;
                }
                let q = target_net.forward(&state.features, &state.edges);
                let types = target_net.num_action_types;
                state
                    .actions
                    .iter()
                    .map(|&(node, ty)| q[node * types + ty])
                    .fold(f64::NEG_INFINITY, f64::max)
            });
            t.reward + gamma * bootstrap
        })
        .collect()
}

/// One gradient step on a batch of transition indices: compute TD targets
/// from the target network, regress the online network onto them, and
/// apply the optimizer. Returns the batch loss.
pub fn train_step(
    net: &mut QNetwork,
    target_net: &QNetwork,
    adam: &mut AdamState,
    set: &TrainingSet,
    batch: &[usize],
    gamma: f64,
) -> f64 {
    let targets = td_targets(target_net, set, batch, gamma);
    let items: Vec<QTarget> = batch
        .iter()
        .zip(&targets)
        .map(|(&index, &target)| {
            let t = &set.transitions[index];
            let state = &set.states[t.state];
            QTarget {
                features: &state.features,
                edges: &state.edges,
                state_key: t.state as u64,
                action: t.action.clone(),
                target,
            }
        })
        .collect();
    let loss = net.loss_and_gradients(&items);
    adam.step(net);
    loss
}

/// Run the full training loop. `eval_hook`, when given, is called with the
/// current step and network before the gradient step at every
/// `eval_every`-th step and once more after the final step, so a learning
/// curve brackets the whole run (the step-0 call sees the fresh network).
pub fn train(
    net: &mut QNetwork,
    set: &TrainingSet,
    config: &TrainerConfig,
    mut eval_hook: Option<&mut dyn FnMut(usize, &QNetwork)>,
) -> TrainResult {
    assert!(!set.is_empty(), "training on an empty set");
    assert!(config.batch_size > 0 && config.target_update > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut cursor = 0usize;
    let mut target_net = net.clone();
    let mut adam = AdamState::new(
        net,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut losses = Vec::with_capacity(config.total_steps);
    let mut syncs = Vec::new();
    for step in 0..config.total_steps {
        if step % config.target_update == 0 {
            target_net = net.clone();
            syncs.push(step);
        }
        if let Some(hook) = eval_hook.as_deref_mut() {
            if config.eval_every > 0 && step % config.eval_every == 0 {
                hook(step, net);
            }
        }
        if cursor == 0 {
            shuffle(&mut order, &mut rng);
        }
        let end = (cursor + config.batch_size).min(order.len());
        let loss = train_step(net, &target_net, &mut adam, set, &order[cursor..end], config.gamma);
        cursor = if end == order.len() { 0 } else { end };
        losses.push((step, loss));
    }
    if let Some(hook) = eval_hook.as_deref_mut() {
        if config.eval_every > 0 {
            hook(config.total_steps, net);
        }
    }
    TrainResult { losses, syncs }
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}
