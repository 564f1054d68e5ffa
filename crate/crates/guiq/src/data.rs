//! Offline episode data: collection, storage, and training-set assembly.
//!
//! Training data is gathered once by a uniform random agent and reused for
//! every experiment. A stored [`Episode`] keeps full, unfiltered states plus
//! the list of events it fired; objective-specific labeling (cropping at
//! task completion, reward assignment, process filtering, vectorization)
//! happens later in [`build_training_set`], so one corpus can serve many
//! objectives. Stores round-trip through a line-delimited JSON file whose
//! bytes are deterministic, which is what makes data generation repeatable.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::env::{AppSpec, EnvError, Objective, Simulator};
use crate::featurize::{
    vectorize_action, vectorize_state, EdgeList, FeaturizeError, NodeFeatures, VectorizedAction,
    Vocabulary,
};
use crate::uitree::{
    canonical_state_hash, default_action_types, enumerate_actions, filter_process, identifier_hex,
    parse_tree, serialize_tree, UIAction, UITree,
};

/// Errors raised by data collection and assembly.
#[derive(Debug, Error)]
pub enum DataError {
    #[error(
        "collection budget exceeded: {attempts} attempts produced only {got} of {needed} qualifying episodes"
    )]
    CollectionBudgetExceeded {
        attempts: usize,
        got: usize,
        needed: usize,
    },
    #[error("episode does not meet objective {0:?}")]
    ObjectiveNotMet(String),
    #[error("no stored episode meets objective {0:?}")]
    NoQualifyingEpisodes(String),
    #[error("cannot split {have} episodes into {k} folds (need k >= 2 and at least k episodes)")]
    TooFewEpisodes { have: usize, k: usize },
    #[error("environment error: {0}")]
    Env(#[from] EnvError),
    #[error("featurization error: {0}")]
    Featurize(#[from] FeaturizeError),
    #[error("episode file error: {0}")]
    Io(String),
    #[error("episode file format error: {0}")]
    Format(String),
}

/// One state-action-reward step. `reward` is the raw simulator reward from
/// collection time; training rewards are re-derived per objective by
/// [`build_training_set`].
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: UITree,
    pub action: UIAction,
    pub reward: f64,
    pub next_state: UITree,
    pub done: bool,
}

/// Provenance and event log of one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeMeta {
    /// Reset seed of the attempt that produced this episode.
    pub seed: u64,
    /// `(transition index, event name)` for every event fired.
    pub fired: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub transitions: Vec<Transition>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Indices of transitions that fired `event`, in order.
    fn firing_steps(&self, event: &str) -> Vec<usize> {
        self.meta
            .fired
            .iter()
            .filter(|(_, name)| name == event)
            .map(|(step, _)| *step)
            .collect()
    }
}

/// A corpus of episodes from one application, with collection provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStore {
    pub app: String,
    pub seed: u64,
    pub policy: String,
    pub episodes: Vec<Episode>,
}

impl EpisodeStore {
    /// All states in the corpus in episode order: each transition's state
    /// plus the final next state of every episode. This is the iterator
    /// vocabulary construction counts over.
    pub fn states(&self) -> impl Iterator<Item = &UITree> {
        self.episodes.iter().flat_map(|episode| {
            episode
                .transitions
                .iter()
                .map(|t| &t.state)
                .chain(episode.transitions.last().map(|t| &t.next_state))
        })
    }

    /// Append all episodes of `other`. Both stores must come from the same
    /// application; provenance fields keep the receiver's values.
    pub fn merge(&mut self, other: EpisodeStore) -> Result<(), DataError> {
        if other.app != self.app {
            return Err(DataError::Format(format!(
                "cannot merge stores from different apps ({:?} vs {:?})",
                self.app, other.app
            )));
        }
        self.episodes.extend(other.episodes);
        Ok(())
    }
}

/// Collection budget and determinism knobs.
#[derive(Debug, Clone)]
pub struct CollectConfig {
    /// Number of qualifying episodes to gather.
    pub episodes: usize,
    /// Hard per-episode length cap; episodes that hit it without completing
    /// the objective are discarded.
    pub max_len: usize,
    pub seed: u64,
    /// Cap on total attempts (qualifying or not) before giving up.
    pub attempt_cap: usize,
}

impl CollectConfig {
    pub fn new(episodes: usize, max_len: usize, seed: u64) -> Self {
        CollectConfig {
            episodes,
            max_len,
            seed,
            attempt_cap: 50 * episodes.max(1),
        }
    }
}

/// Run a uniform random agent until `config.episodes` episodes that fired
/// the objective to completion are gathered. Non-qualifying attempts are
/// discarded but consume budget. Fully deterministic in `config.seed`.
pub fn collect_random_episodes(
    spec: &AppSpec,
    objective: &Objective,
    config: &CollectConfig,
) -> Result<EpisodeStore, DataError> {
    let mut sim = Simulator::new(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let types = default_action_types();
    let mut episodes = Vec::with_capacity(config.episodes);
    let mut attempts = 0usize;
    while episodes.len() < config.episodes {
        if attempts >= config.attempt_cap {
            return Err(DataError::CollectionBudgetExceeded {
                attempts,
                got: episodes.len(),
                needed: config.episodes,
            });
        }
        let attempt_seed = config.seed.wrapping_add(attempts as u64);
        attempts += 1;
        let mut tree = sim.reset_single(objective, attempt_seed)?;
        let mut transitions = Vec::new();
        let mut fired = Vec::new();
        let mut completed = false;
        for step in 0..config.max_len {
            let actions = enumerate_actions(&tree, &types);
            let action = actions[rng.random_range(0..actions.len())].clone();
            let result = sim.step(&action)?;
            for event in &result.fired_events {
                fired.push((step, event.clone()));
            }
            transitions.push(Transition {
                state: tree,
                action,
                reward: result.reward,
                next_state: result.next_state.clone(),
                done: result.done,
            });
            tree = result.next_state;
            if result.done {
                completed = true;
                break;
            }
        }
        if completed {
            episodes.push(Episode {
                meta: EpisodeMeta {
                    seed: attempt_seed,
                    fired,
                },
                transitions,
            });
        }
    }
    Ok(EpisodeStore {
        app: spec.name.clone(),
        seed: config.seed,
        policy: "random".to_owned(),
        episodes,
    })
}

/// True when the episode fired the objective's event at least its target
/// count of times.
pub fn episode_meets_objective(episode: &Episode, objective: &Objective) -> bool {
    episode.firing_steps(&objective.event_name).len() >= objective.target_count as usize
}

/// Truncate an episode at the transition where the objective completes (the
/// `target_count`-th firing of its event), marking that transition done and
/// all earlier ones not-done. Metadata keeps only events inside the kept
/// prefix.
pub fn crop_episode(episode: &Episode, objective: &Objective) -> Result<Episode, DataError> {
    let firings = episode.firing_steps(&objective.event_name);
    let target = objective.target_count as usize;
    if firings.len() < target {
        return Err(DataError::ObjectiveNotMet(objective.event_name.clone()));
    }
    let last_step = firings[target - 1];
    let mut transitions: Vec<Transition> = episode.transitions[..=last_step].to_vec();
    for (i, t) in transitions.iter_mut().enumerate() {
        t.done = i == last_step;
    }
    Ok(Episode {
        meta: EpisodeMeta {
            seed: episode.meta.seed,
            fired: episode
                .meta
                .fired
                .iter()
                .filter(|(step, _)| *step <= last_step)
                .cloned()
                .collect(),
        },
        transitions,
    })
}

/// Qualifying episodes of `store` labeled for one objective: cropped at
/// completion, rewards set to `r_norm` at the objective's event transitions
/// and 0 elsewhere, and every state restricted to `process`. This is the
/// raw (tree-level) form shared by the network pipeline and the tabular
/// baseline.
pub fn prepare_episodes(
    store: &EpisodeStore,
    objective: &Objective,
    process: &str,
) -> Result<Vec<Episode>, DataError> {
    let mut prepared = Vec::new();
    for episode in &store.episodes {
        if !episode_meets_objective(episode, objective) {
            continue;
        }
        let mut cropped = crop_episode(episode, objective)?;
        let firing: Vec<usize> = cropped.firing_steps(&objective.event_name);
        for (i, t) in cropped.transitions.iter_mut().enumerate() {
            t.reward = if firing.contains(&i) {
                objective.r_norm()
            } else {
                0.0
            };
            t.state = filter_process(&t.state, process);
            t.next_state = filter_process(&t.next_state, process);
        }
        prepared.push(cropped);
    }
    if prepared.is_empty() {
        return Err(DataError::NoQualifyingEpisodes(objective.event_name.clone()));
    }
    Ok(prepared)
}

/// One state in network coordinates, shared by every transition that flows
/// through it. `actions` caches the enumerated action set as (node index,
/// type index) pairs, which is what bootstrap maxima and policies iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVec {
    pub features: NodeFeatures,
    pub edges: EdgeList,
    pub actions: Vec<(usize, usize)>,
    pub hash: u64,
}

/// A transition with both states replaced by indices into the shared state
/// pool of its [`TrainingSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct VecTransition {
    pub state: usize,
    pub action: VectorizedAction,
    pub reward: f64,
    pub next_state: usize,
    pub done: bool,
}

/// Vectorized training data: a deduplicated state pool plus transitions in
/// pool coordinates. Deduplication keys on the canonical state hash, so two
/// occurrences of the same screen share one encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub states: Vec<StateVec>,
    pub transitions: Vec<VecTransition>,
    pub action_types: Vec<String>,
    pub vocab_fingerprint: u64,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Assemble the vectorized training set for one or more objectives. Each
/// objective contributes its own pass over the corpus (an episode that
/// qualifies for two objectives appears twice, labeled differently), which
/// is how multi-task sets are formed.
pub fn build_training_set(
    store: &EpisodeStore,
    objectives: &[Objective],
    process: &str,
    vocab: &Vocabulary,
) -> Result<TrainingSet, DataError> {
    let action_types = default_action_types();
    let mut states: Vec<StateVec> = Vec::new();
    let mut by_hash: HashMap<u64, usize> = HashMap::new();
    let mut transitions = Vec::new();
    let mut intern = |tree: &UITree, states: &mut Vec<StateVec>| -> usize {
        let hash = canonical_state_hash(tree);
        if let Some(&i) = by_hash.get(&hash) {
            return i;
        }
        let (features, edges) = vectorize_state(tree, vocab);
        let mut actions = Vec::new();
        for (index, node) in tree.pre_order().into_iter().enumerate() {
            if node.is_actionable() {
                for type_index in 0..action_types.len() {
                    actions.push((index, type_index));
                }
            }
        }
        states.push(StateVec {
            features,
            edges,
            actions,
            hash,
        });
        by_hash.insert(hash, states.len() - 1);
        states.len() - 1
    };

    for objective in objectives {
        for episode in prepare_episodes(store, objective, process)? {
            for t in &episode.transitions {
                let state = intern(&t.state, &mut states);
                let next_state = intern(&t.next_state, &mut states);
                let action = vectorize_action(&t.state, &t.action, &action_types)?;
                transitions.push(VecTransition {
                    state,
                    action,
                    reward: t.reward,
                    next_state,
                    done: t.done,
                });
            }
        }
    }
    Ok(TrainingSet {
        states,
        transitions,
        action_types,
        vocab_fingerprint: vocab.fingerprint(),
    })
}

/// Train/test episode indices of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partition episode indices into `k` folds of near-equal size (sizes
/// differ by at most one) after a seeded shuffle. Fold `i`'s test set is
/// the `i`-th chunk; its train set is everything else, in shuffled order.
pub fn k_fold_split(store: &EpisodeStore, k: usize, seed: u64) -> Result<Vec<FoldSplit>, DataError> {
    let n = store.episodes.len();
    if k < 2 || n < k {
        return Err(DataError::TooFewEpisodes { have: n, k });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates, driven by our own rng for reproducibility.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let test: Vec<usize> = indices[start..start + size].to_vec();
        let train: Vec<usize> = indices[..start]
            .iter()
            .chain(&indices[start + size..])
            .copied()
            .collect();
        folds.push(FoldSplit { train, test });
        start += size;
    }
    Ok(folds)
}

/// Materialize a sub-store holding the given episode indices (cloned).
pub fn subset_store(store: &EpisodeStore, indices: &[usize]) -> EpisodeStore {
    EpisodeStore {
        app: store.app.clone(),
        seed: store.seed,
        policy: store.policy.clone(),
        episodes: indices.iter().map(|&i| store.episodes[i].clone()).collect(),
    }
}

// ---------------------------------------------------------------------------
// Store file format: line-delimited JSON. The first line is a header with
// collection provenance; each further line is one episode with its distinct
// states embedded as tree documents and its steps indexing into them.
// ---------------------------------------------------------------------------

const STORE_FORMAT: &str = "guiq-episodes";
const STORE_VERSION: u64 = 1;

fn episode_to_json(episode: &Episode) -> Value {
    let mut state_docs: Vec<Value> = Vec::new();
    let mut by_hash: HashMap<u64, usize> = HashMap::new();
    let mut intern = |tree: &UITree, state_docs: &mut Vec<Value>| -> usize {
        let hash = canonical_state_hash(tree);
        *by_hash.entry(hash).or_insert_with(|| {
            let doc: Value = serde_json::from_str(&serialize_tree(tree))
                .expect("canonical serialization is valid JSON");
            state_docs.push(doc);
            state_docs.len() - 1
        })
    };
    let steps: Vec<Value> = episode
        .transitions
        .iter()
        .map(|t| {
            let s = intern(&t.state, &mut state_docs);
            let ns = intern(&t.next_state, &mut state_docs);
            json!({
                "s": s,
                "a": t.action,
                "r": t.reward,
                "ns": ns,
                "done": t.done,
            })
        })
        .collect();
    let fired: Vec<Value> = episode
        .meta
        .fired
        .iter()
        .map(|(step, event)| json!([step, event]))
        .collect();
    json!({
        "seed": episode.meta.seed,
        "states": state_docs,
        "steps": steps,
        "fired": fired,
    })
}

fn episode_from_json(value: &Value, line: usize) -> Result<Episode, DataError> {
    let bad = |msg: &str| DataError::Format(format!("line {line}: {msg}"));
    let obj = value.as_object().ok_or_else(|| bad("episode must be an object"))?;
    let seed = obj
        .get("seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad("missing seed"))?;
    let mut states = Vec::new();
    for doc in obj
        .get("states")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing states"))?
    {
        let tree =
            parse_tree(&doc.to_string()).map_err(|e| bad(&format!("bad state document: {e}")))?;
        states.push(tree);
    }
    let mut transitions = Vec::new();
    for step in obj
        .get("steps")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing steps"))?
    {
        let index = |key: &str| -> Result<usize, DataError> {
            let i = step
                .get(key)
                .and_then(Value::as_u64)
                .ok_or_else(|| bad(&format!("step missing {key:?}")))? as usize;
            if i >= states.len() {
                return Err(bad(&format!("state index {i} out of range")));
            }
            Ok(i)
        };
        let action: UIAction = serde_json::from_value(
            step.get("a").cloned().ok_or_else(|| bad("step missing action"))?,
        )
        .map_err(|e| bad(&format!("bad action: {e}")))?;
        transitions.push(Transition {
            state: states[index("s")?].clone(),
            action,
            reward: step
                .get("r")
                .and_then(Value::as_f64)
                .ok_or_else(|| bad("step missing reward"))?,
            next_state: states[index("ns")?].clone(),
            done: step
                .get("done")
                .and_then(Value::as_bool)
                .ok_or_else(|| bad("step missing done"))?,
        });
    }
    let mut fired = Vec::new();
    for entry in obj
        .get("fired")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing fired"))?
    {
        let pair = entry.as_array().filter(|p| p.len() == 2).ok_or_else(|| bad("bad fired entry"))?;
        let step = pair[0].as_u64().ok_or_else(|| bad("bad fired step"))? as usize;
        let event = pair[1].as_str().ok_or_else(|| bad("bad fired event"))?.to_owned();
        fired.push((step, event));
    }
    Ok(Episode {
        meta: EpisodeMeta { seed, fired },
        transitions,
    })
}

/// Write a store as deterministic line-delimited JSON.
pub fn save_store(store: &EpisodeStore, path: &Path) -> Result<(), DataError> {
    save_store_tagged(store, path, None)
}

/// Like [`save_store`], additionally embedding a run-configuration
/// fingerprint in the header for provenance. Loading ignores the extra key.
pub fn save_store_tagged(
    store: &EpisodeStore,
    path: &Path,
    config_fingerprint: Option<u64>,
) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path).map_err(|e| DataError::Io(e.to_string()))?;
    let mut header = json!({
        "format": STORE_FORMAT,
        "version": STORE_VERSION,
        "app": store.app,
        "seed": store.seed,
        "policy": store.policy,
        "episodes": store.episodes.len(),
    });
    if let Some(fp) = config_fingerprint {
        header
            .as_object_mut()
            .expect("header is an object")
            .insert("config".to_owned(), Value::String(identifier_hex(fp)));
    }
    writeln!(file, "{header}").map_err(|e| DataError::Io(e.to_string()))?;
    for episode in &store.episodes {
        writeln!(file, "{}", episode_to_json(episode)).map_err(|e| DataError::Io(e.to_string()))?;
    }
    Ok(())
}

/// Read a store written by [`save_store`].
pub fn load_store(path: &Path) -> Result<EpisodeStore, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io(e.to_string()))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DataError::Format("empty episode file".to_owned()))?
        .map_err(|e| DataError::Io(e.to_string()))?;
    let header: Value = serde_json::from_str(&header_line)
        .map_err(|e| DataError::Format(format!("bad header: {e}")))?;
    if header.get("format").and_then(Value::as_str) != Some(STORE_FORMAT) {
        return Err(DataError::Format("not an episode store file".to_owned()));
    }
    if header.get("version").and_then(Value::as_u64) != Some(STORE_VERSION) {
        return Err(DataError::Format("unsupported episode store version".to_owned()));
    }
    let field = |name: &str| -> Result<String, DataError> {
        header
            .get(name)
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| DataError::Format(format!("header missing {name:?}")))
    };
    let mut episodes = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| DataError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| DataError::Format(format!("line {}: {e}", i + 2)))?;
        episodes.push(episode_from_json(&value, i + 2)?);
    }
    let declared = header.get("episodes").and_then(Value::as_u64).unwrap_or(0) as usize;
    if declared != episodes.len() {
        return Err(DataError::Format(format!(
            "header declares {declared} episodes, file holds {}",
            episodes.len()
        )));
    }
    Ok(EpisodeStore {
        app: field("app")?,
        seed: header
            .get("seed")
            .and_then(Value::as_u64)
            .ok_or_else(|| DataError::Format("header missing seed".to_owned()))?,
        policy: field("policy")?,
        episodes,
    })
}
