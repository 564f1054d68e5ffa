//! Action-selection policies over learned Q-values.
//!
//! Three network-backed behaviors — greedy, Boltzmann sampling at a
//! temperature, and uniform random — plus a tabular baseline that stores
//! one Q-value per exact (state, action) hash. Policies are exposed both
//! as pure functions over a Q-matrix (easy to test against closed forms)
//! and as stateful [`Agent`]s that carry their network, vocabulary, rng,
//! and a per-state Q cache, which is what the evaluation loop drives.
//!
//! Ties in the argmax are broken toward the lowest (node index, action
//! type index) pair so greedy behavior is fully deterministic.

use std::collections::{HashMap, HashSet};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Episode;
use crate::featurize::{vectorize_state, Vocabulary};
use crate::nn::QNetwork;
use crate::uitree::{
    canonical_state_hash, default_action_types, fnv1a_64, identifier_hex, node_identifier,
    parse_identifier_hex, UIAction, UITree,
};

/// Format tag of persisted Q-hash tables.
const QTABLE_FORMAT: &str = "guiq-qtable";

/// Default step size of the tabular baseline.
pub const QHASH_LEARNING_RATE: f64 = 0.5;
/// Default sweep count of the tabular baseline. Targets are deterministic
/// per key, so the residual shrinks by `1 - lr` per pass and is below
/// `1e-15` well before this many sweeps.
pub const QHASH_PASSES: usize = 50;

/// Errors raised by action selection.
#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("state offers no actions")]
    NoActions,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("q-table file error: {0}")]
    Io(String),
    #[error("bad q-table file: {0}")]
    Format(String),
}

/// Argmax over the allowed `(node index, type index)` pairs of a Q-matrix
/// (row-major `num_nodes x num_types`), first-listed winner on ties.
pub fn greedy_action(
    q: &[f64],
    num_types: usize,
    actions: &[(usize, usize)],
) -> Result<(usize, usize), PolicyError> {
    let mut best: Option<((usize, usize), f64)> = None;
    for &(node, ty) in actions {
        let value = q[node * num_types + ty];
        if best.map_or(true, |(_, b)| value > b) {
            best = Some(((node, ty), value));
        }
    }
    best.map(|(pick, _)| pick).ok_or(PolicyError::NoActions)
}

/// Boltzmann draw: actions are weighted `exp(Q / temperature)` (computed
/// with the usual max subtraction). An infinite temperature degenerates to
/// an exact uniform draw rather than trusting `exp` near zero.
pub fn sample_action(
    q: &[f64],
    num_types: usize,
    actions: &[(usize, usize)],
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize), PolicyError> {
    if actions.is_empty() {
        return Err(PolicyError::NoActions);
    }
    if !(temperature > 0.0) {
        return Err(PolicyError::InvalidTemperature(temperature));
    }
    if temperature.is_infinite() {
        return Ok(actions[rng.random_range(0..actions.len())]);
    }
    let scaled: Vec<f64> = actions
        .iter()
        .map(|&(node, ty)| q[node * num_types + ty] / temperature)
        .collect();
    let max = scaled.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let weights: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    // Inverse-CDF draw; the final branch absorbs floating-point shortfall.
    let mut u = rng.random::<f64>() * total;
    for (pick, weight) in actions.iter().zip(&weights) {
        if u < *weight {
            return Ok(*pick);
        }
        u -= weight;
    }
    Ok(*actions.last().expect("actions checked non-empty"))
}

/// Uniform draw over the allowed actions.
pub fn random_action(
    actions: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize), PolicyError> {
    if actions.is_empty() {
        return Err(PolicyError::NoActions);
    }
    Ok(actions[rng.random_range(0..actions.len())])
}

/// Enumerated actions of a state as index pairs, in the canonical
/// node-major order.
fn indexed_actions(tree: &UITree, num_types: usize) -> Vec<(usize, usize)> {
    let mut actions = Vec::new();
    for (node_index, node) in tree.pre_order().into_iter().enumerate() {
        if node.is_actionable() {
            for type_index in 0..num_types {
                actions.push((node_index, type_index));
            }
        }
    }
    actions
}

/// Map an index pair back to a concrete action on the tree.
fn to_ui_action(tree: &UITree, types: &[String], pick: (usize, usize)) -> UIAction {
    let node = tree.pre_order()[pick.0];
    UIAction::new(node_identifier(node), &types[pick.1])
}

/// A behavior the evaluation loop can drive: given the current (already
/// process-filtered) state, choose an action.
pub trait Agent {
    fn select(&mut self, tree: &UITree) -> Result<UIAction, PolicyError>;
    /// Short label for reports.
    fn label(&self) -> &str;
}

/// Shared plumbing of the network-backed agents: vectorize the state once
/// per distinct canonical hash and cache its Q-matrix.
struct QCache {
    net: QNetwork,
    vocab: Vocabulary,
    cache: HashMap<u64, Vec<f64>>,
}

impl QCache {
    fn q_for(&mut self, tree: &UITree) -> &[f64] {
        let hash = canonical_state_hash(tree);
        self.cache.entry(hash).or_insert_with(|| {
            let (features, edges) = vectorize_state(tree, &self.vocab);
            self.net.forward(&features, &edges)
        })
    }
}

/// Deterministic argmax agent.
pub struct GreedyAgent {
    q: QCache,
    types: Vec<String>,
}

impl GreedyAgent {
    pub fn new(net: QNetwork, vocab: Vocabulary) -> GreedyAgent {
        GreedyAgent {
            q: QCache {
                net,
                vocab,
                cache: HashMap::new(),
            },
            types: default_action_types(),
        }
    }

    /// Number of distinct states forwarded so far.
    pub fn cache_len(&self) -> usize {
        self.q.cache.len()
    }
}

impl Agent for GreedyAgent {
    fn select(&mut self, tree: &UITree) -> Result<UIAction, PolicyError> {
        let num_types = self.types.len();
        let actions = indexed_actions(tree, num_types);
        let q = self.q.q_for(tree);
        let pick = greedy_action(q, num_types, &actions)?;
        Ok(to_ui_action(tree, &self.types, pick))
    }

    fn label(&self) -> &str {
        "greedy"
    }
}

/// Boltzmann-sampling agent at a fixed temperature.
pub struct SamplerAgent {
    q: QCache,
    types: Vec<String>,
    temperature: f64,
    rng: ChaCha8Rng,
}

impl SamplerAgent {
    pub fn new(net: QNetwork, vocab: Vocabulary, temperature: f64, seed: u64) -> SamplerAgent {
        SamplerAgent {
            q: QCache {
                net,
                vocab,
                cache: HashMap::new(),
            },
            types: default_action_types(),
            temperature,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Agent for SamplerAgent {
    fn select(&mut self, tree: &UITree) -> Result<UIAction, PolicyError> {
        let num_types = self.types.len();
        let actions = indexed_actions(tree, num_types);
        // Split borrows: draw after the cache lookup.
        let pick = {
            let q = self.q.q_for(tree).to_vec();
            sample_action(&q, num_types, &actions, self.temperature, &mut self.rng)?
        };
        Ok(to_ui_action(tree, &self.types, pick))
    }

    fn label(&self) -> &str {
        "sampler"
    }
}

/// Uniform random agent (the data-collection behavior, reusable as an
/// evaluation baseline).
pub struct RandomAgent {
    types: Vec<String>,
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(seed: u64) -> RandomAgent {
        RandomAgent {
            types: default_action_types(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Agent for RandomAgent {
    fn select(&mut self, tree: &UITree) -> Result<UIAction, PolicyError> {
        let num_types = self.types.len();
        let actions = indexed_actions(tree, num_types);
        let pick = random_action(&actions, &mut self.rng)?;
        Ok(to_ui_action(tree, &self.types, pick))
    }

    fn label(&self) -> &str {
        "random"
    }
}

/// Key of one (state, action) cell: the canonical state hash folded with a
/// hash of the action's canonical form. Any change to the state document —
/// including an automation id — changes the key.
pub fn action_key(state_hash: u64, action: &UIAction) -> u64 {
    let mut bytes = Vec::with_capacity(16 + 1 + action.action_type.len());
    bytes.extend_from_slice(identifier_hex(action.node_identifier).as_bytes());
    bytes.push(0x1F);
    bytes.extend_from_slice(action.action_type.as_bytes());
    state_hash ^ fnv1a_64(&bytes)
}

/// Tabular Q-function over exact (state, action) hashes. Unknown keys read
/// as zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QHashTable {
    pub q: HashMap<u64, f64>,
}

impl QHashTable {
    pub fn get(&self, key: u64) -> f64 {
        self.q.get(&key).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Write the table as a JSON map of hex key to value, keys sorted so
    /// identical tables produce identical files.
    pub fn save(&self, path: &std::path::Path) -> Result<(), PolicyError> {
        self.save_tagged(path, None)
    }

    /// Like [`QHashTable::save`], additionally embedding a
    /// run-configuration fingerprint for provenance. Loading ignores the
    /// extra key.
    pub fn save_tagged(
        &self,
        path: &std::path::Path,
        config_fingerprint: Option<u64>,
    ) -> Result<(), PolicyError> {
        let entries: std::collections::BTreeMap<String, f64> = self
            .q
            .iter()
            .map(|(&k, &v)| (identifier_hex(k), v))
            .collect();
        let mut doc = serde_json::json!({
            "format": QTABLE_FORMAT,
            "version": 1,
            "entries": entries,
        });
        if let Some(fp) = config_fingerprint {
            doc.as_object_mut()
                .expect("table document is an object")
                .insert(
                    "config".to_owned(),
                    serde_json::Value::String(identifier_hex(fp)),
                );
        }
        let text = serde_json::to_string_pretty(&doc).expect("table serializes");
        std::fs::write(path, text).map_err(|e| PolicyError::Io(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<QHashTable, PolicyError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PolicyError::Io(e.to_string()))?;
        let doc: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| PolicyError::Format(format!("bad JSON: {e}")))?;
        if doc.get("format").and_then(serde_json::Value::as_str) != Some(QTABLE_FORMAT) {
            return Err(PolicyError::Format(format!(
                "expected format {QTABLE_FORMAT:?}"
            )));
        }
        let entries = doc
            .get("entries")
            .and_then(serde_json::Value::as_object)
            .ok_or_else(|| PolicyError::Format("missing entries map".to_owned()))?;
        let mut q = HashMap::with_capacity(entries.len());
        for (hex, value) in entries {
            let key = parse_identifier_hex(hex)
                .ok_or_else(|| PolicyError::Format(format!("bad key {hex:?}")))?;
            let value = value
                .as_f64()
                .ok_or_else(|| PolicyError::Format(format!("non-numeric value for {hex}")))?;
            q.insert(key, value);
        }
        Ok(QHashTable { q })
    }
}

/// Fit the tabular baseline on prepared (labeled, cropped, filtered)
/// episodes: repeated shuffled sweeps of the one-step update
/// `Q(k) += lr * (r + gamma * max_a' Q(s', a') - Q(k))`, with the
/// bootstrap dropped on terminal transitions.
pub fn qhash_fit(
    episodes: &[Episode],
    gamma: f64,
    learning_rate: f64,
    passes: usize,
    seed: u64,
) -> QHashTable {
    let types = default_action_types();
    let mut table = QHashTable::default();
    // Precompute per-transition keys and next-state action keys.
    struct Cell {
        key: u64,
        reward: f64,
        done: bool,
        next_keys: Vec<u64>,
    }
    let mut cells = Vec::new();
    for episode in episodes {
        for t in &episode.transitions {
            let state_hash = canonical_state_hash(&t.state);
            let next_hash = canonical_state_hash(&t.next_state);
            let next_keys = crate::uitree::enumerate_actions(&t.next_state, &types)
                .iter()
                .map(|a| action_key(next_hash, a))
                .collect();
            cells.push(Cell {
                key: action_key(state_hash, &t.action),
                reward: t.reward,
                done: t.done,
                next_keys,
            });
        }
    }
    let mut order: Vec<usize> = (0..cells.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..passes {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for &i in &order {
            let cell = &cells[i];
            let bootstrap = if cell.done {
                0.0
            } else {
                cell.next_keys
                    .iter()
                    .map(|&k| table.get(k))
                    .fold(0.0, f64::max)
            };
            let target = cell.reward + gamma * bootstrap;
            let old = table.get(cell.key);
            table.q.insert(cell.key, old + learning_rate * (target - old));
        }
    }
    table
}

/// Greedy agent over a [`QHashTable`], recording every key it looks up so
/// train/test key overlap can be inspected afterwards.
pub struct QHashAgent {
    table: QHashTable,
    types: Vec<String>,
    observed: HashSet<u64>,
}

impl QHashAgent {
    pub fn new(table: QHashTable) -> QHashAgent {
        QHashAgent {
            table,
            types: default_action_types(),
            observed: HashSet::new(),
        }
    }

    /// Keys looked up while acting so far.
    pub fn observed_keys(&self) -> &HashSet<u64> {
        &self.observed
    }

    pub fn table(&self) -> &QHashTable {
        &self.table
    }
}

impl Agent for QHashAgent {
    fn select(&mut self, tree: &UITree) -> Result<UIAction, PolicyError> {
        let state_hash = canonical_state_hash(tree);
        let actions = crate::uitree::enumerate_actions(tree, &self.types);
        let mut best: Option<(&UIAction, f64)> = None;
        for action in &actions {
            let key = action_key(state_hash, action);
            self.observed.insert(key);
            let value = self.table.get(key);
            if best.map_or(true, |(_, b)| value > b) {
                best = Some((action, value));
            }
        }
        best.map(|(a, _)| a.clone()).ok_or(PolicyError::NoActions)
    }

    fn label(&self) -> &str {
        "qhash"
    }
}
