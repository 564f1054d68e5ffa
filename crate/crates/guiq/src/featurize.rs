//! One-hot graph encoding of UI trees.
//!
//! A [`Vocabulary`] maps every property value seen often enough in a corpus
//! to its own index, with index 0 of each property block reserved for the
//! "Other" bucket that absorbs rare and unseen values. [`vectorize_state`]
//! turns a tree into the (node features, edge list) pair consumed by the
//! graph network, and [`vectorize_action`] turns a [`UIAction`] into the
//! (action-type index, node index) pair that addresses the network's output
//! matrix. The vocabulary is frozen at training time and shipped alongside
//! the network, so encodings stay comparable across processes and runs.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::uitree::{fnv1a_64, UIAction, UINode, UITree};

/// Value used in place of an absent automation id. It lives in the
/// vocabulary like any observed string, so "has no automation id" is itself
/// a learnable feature.
pub const ABSENT_AUTOMATION_ID: &str = "<none>";

/// Index of the "Other" bucket inside every property block.
pub const OTHER_INDEX: usize = 0;

/// Errors raised while encoding states and actions.
#[derive(Debug, Error)]
pub enum FeaturizeError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("action refers to node {0:016x} which is not present in the state")]
    NodeNotInState(u64),
    #[error("action type {0:?} is not registered")]
    UnknownActionType(String),
    #[error("inconsistent feature shape: {0}")]
    Shape(String),
    #[error("vocabulary file error: {0}")]
    Io(String),
}

/// Knobs for vocabulary construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// A value must occur at least this many times across the corpus states
    /// to earn its own index; rarer values fall into "Other".
    pub min_count: usize,
    /// When false the automation-id block is dropped entirely, for corpora
    /// whose automation ids are too unstable to be informative.
    pub include_automation_id: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            min_count: 2,
            include_automation_id: true,
        }
    }
}

/// Index map for one property: `values[k]` owns index `k + 1`, index 0 is
/// the implicit "Other" bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyVocab {
    values: Vec<String>,
    index: HashMap<String, usize>,
}

impl PropertyVocab {
    fn from_counts(counts: &HashMap<String, usize>, min_count: usize) -> Self {
        let mut kept: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(_, &c)| c >= min_count)
            .map(|(v, &c)| (v, c))
            .collect();
        // Highest count first so frequent values get small indices; ties
        // break lexicographically to keep the order deterministic.
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let values: Vec<String> = kept.into_iter().map(|(v, _)| v.clone()).collect();
        Self::from_values(values)
    }

    fn from_values(values: Vec<String>) -> Self {
        let index = values
            .iter()
            .enumerate()
            .map(|(k, v)| (v.clone(), k + 1))
            .collect();
        PropertyVocab { values, index }
    }

    fn empty() -> Self {
        Self::from_values(Vec::new())
    }

    /// Block width including the "Other" slot.
    pub fn len(&self) -> usize {
        self.values.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false // the "Other" slot always exists
    }

    /// Index of `value` within this block; unseen values land on "Other".
    pub fn index_of(&self, value: &str) -> usize {
        self.index.get(value).copied().unwrap_or(OTHER_INDEX)
    }

    /// Values owning dedicated indices, in index order (starting at 1).
    pub fn values(&self) -> &[String] {
        &self.values
    }
}

/// Frozen per-property index maps plus the configuration they were built
/// with. Feature width and block layout are fully determined by this value.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub config: FeatureConfig,
    pub automation_id: PropertyVocab,
    pub class_name: PropertyVocab,
    pub control_type: PropertyVocab,
    pub process_name: PropertyVocab,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    min_count: usize,
    include_automation_id: bool,
    width: usize,
    automation_id: Vec<String>,
    class_name: Vec<String>,
    control_type: Vec<String>,
    process_name: Vec<String>,
}

impl Vocabulary {
    /// Total one-hot width `z`: the sum of all block widths.
    pub fn width(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Number of ones each feature row carries (one per property block).
    pub fn ones_per_row(&self) -> usize {
        self.blocks().len()
    }

    fn blocks(&self) -> Vec<&PropertyVocab> {
        let mut blocks = Vec::with_capacity(4);
        if self.config.include_automation_id {
            blocks.push(&self.automation_id);
        }
        blocks.push(&self.class_name);
        blocks.push(&self.control_type);
        blocks.push(&self.process_name);
        blocks
    }

    /// Active feature indices for one node, one per property block, offset
    /// into the concatenated feature vector.
    pub fn node_indices(&self, node: &UINode) -> Vec<usize> {
        let mut indices = Vec::with_capacity(4);
        let mut offset = 0;
        if self.config.include_automation_id {
            let value = node.automation_id.as_deref().unwrap_or(ABSENT_AUTOMATION_ID);
            indices.push(offset + self.automation_id.index_of(value));
            offset += self.automation_id.len();
        }
        indices.push(offset + self.class_name.index_of(&node.class_name));
        offset += self.class_name.len();
        indices.push(offset + self.control_type.index_of(&node.control_type));
        offset += self.control_type.len();
        indices.push(offset + self.process_name.index_of(&node.process_name));
        indices
    }

    /// Stable content hash of the vocabulary, embedded in checkpoints so a
    /// network is never applied to features from a different vocabulary.
    pub fn fingerprint(&self) -> u64 {
        fnv1a_64(self.to_json().as_bytes())
    }

    /// Canonical JSON form (fixed field order, deterministic value order).
    pub fn to_json(&self) -> String {
        let repr = VocabularyRepr {
            min_count: self.config.min_count,
            include_automation_id: self.config.include_automation_id,
            width: self.width(),
            automation_id: self.automation_id.values().to_vec(),
            class_name: self.class_name.values().to_vec(),
            control_type: self.control_type.values().to_vec(),
            process_name: self.process_name.values().to_vec(),
        };
        serde_json::to_string(&repr).expect("vocabulary serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self, FeaturizeError> {
        let repr: VocabularyRepr =
            serde_json::from_str(json).map_err(|e| FeaturizeError::Io(e.to_string()))?;
        let vocab = Vocabulary {
            config: FeatureConfig {
                min_count: repr.min_count,
                include_automation_id: repr.include_automation_id,
            },
            automation_id: PropertyVocab::from_values(repr.automation_id),
            class_name: PropertyVocab::from_values(repr.class_name),
            control_type: PropertyVocab::from_values(repr.control_type),
            process_name: PropertyVocab::from_values(repr.process_name),
        };
        if vocab.width() != repr.width {
            return Err(FeaturizeError::Io(format!(
                "vocabulary width mismatch: file says {}, contents give {}",
                repr.width,
                vocab.width()
            )));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), FeaturizeError> {
        std::fs::write(path, self.to_json()).map_err(|e| FeaturizeError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, FeaturizeError> {
        let json = std::fs::read_to_string(path).map_err(|e| FeaturizeError::Io(e.to_string()))?;
        Self::from_json(&json)
    }
}

/// Build a vocabulary from the states of a training corpus. Occurrences are
/// counted per node per state, so a value showing on three nodes of one
/// state counts three times.
pub fn build_vocabulary<'a>(
    states: impl IntoIterator<Item = &'a UITree>,
    config: &FeatureConfig,
) -> Result<Vocabulary, FeaturizeError> {
    let mut automation: HashMap<String, usize> = HashMap::new();
    let mut class: HashMap<String, usize> = HashMap::new();
    let mut control: HashMap<String, usize> = HashMap::new();
    let mut process: HashMap<String, usize> = HashMap::new();
    let mut seen_any = false;
    for tree in states {
        seen_any = true;
        for node in tree.pre_order() {
            let auto_value = node.automation_id.as_deref().unwrap_or(ABSENT_AUTOMATION_ID);
            *automation.entry(auto_value.to_owned()).or_insert(0) += 1;
            *class.entry(node.class_name.clone()).or_insert(0) += 1;
            *control.entry(node.control_type.clone()).or_insert(0) += 1;
            *process.entry(node.process_name.clone()).or_insert(0) += 1;
        }
    }
    if !seen_any {
        return Err(FeaturizeError::EmptyCorpus);
    }
    Ok(Vocabulary {
        config: config.clone(),
        automation_id: if config.include_automation_id {
            PropertyVocab::from_counts(&automation, config.min_count)
        } else {
            PropertyVocab::empty()
        },
        class_name: PropertyVocab::from_counts(&class, config.min_count),
        control_type: PropertyVocab::from_counts(&control, config.min_count),
        process_name: PropertyVocab::from_counts(&process, config.min_count),
    })
}

/// One-hot node feature matrix in sparse form: per node, the indices of its
/// active columns (one per property block). `dense_row` materializes the
/// 0/1 row when a test or a reference implementation wants the full matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeFeatures {
    num_nodes: usize,
    width: usize,
    ones_per_row: usize,
    active: Vec<usize>, // flat, `ones_per_row` entries per node
}

impl NodeFeatures {
    /// Build a feature matrix from explicit active-column indices
    /// (`ones_per_row` entries per node, each below `width`). Lets synthetic
    /// graphs bypass tree vectorization, e.g. in network tests.
    pub fn from_active(
        width: usize,
        ones_per_row: usize,
        active: Vec<Vec<usize>>,
    ) -> Result<NodeFeatures, FeaturizeError> {
        let num_nodes = active.len();
        let mut flat = Vec::with_capacity(num_nodes * ones_per_row);
        for row in &active {
            if row.len() != ones_per_row {
                return Err(FeaturizeError::Shape(format!(
                    "feature row has {} entries, expected {ones_per_row}",
                    row.len()
                )));
            }
            for &k in row {
                if k >= width {
                    return Err(FeaturizeError::Shape(format!(
                        "feature column {k} out of range (width {width})"
                    )));
                }
                flat.push(k);
            }
        }
        Ok(NodeFeatures {
            num_nodes,
            width,
            ones_per_row,
            active: flat,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Feature width `z` (number of columns).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ones_per_row(&self) -> usize {
        self.ones_per_row
    }

    /// Active column indices of node `i`, in block order.
    pub fn active(&self, i: usize) -> &[usize] {
        let start = i * self.ones_per_row;
        &self.active[start..start + self.ones_per_row]
    }

    /// Materialized 0/1 row of node `i`.
    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.width];
        for &k in self.active(i) {
            row[k] = 1.0;
        }
        row
    }
}

/// Undirected tree connectivity as ordered pairs: every parent-child link
/// appears in both directions, never as a self-loop.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EdgeList {
    pub pairs: Vec<(usize, usize)>,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Encode a state as the (features, edges) pair the graph network consumes.
/// Rows follow pre-order node indexing; edges are emitted (parent, child)
/// then (child, parent) during the same pre-order walk.
pub fn vectorize_state(tree: &UITree, vocab: &Vocabulary) -> (NodeFeatures, EdgeList) {
    let nodes = tree.pre_order();
    let ones = vocab.ones_per_row();
    let mut active = Vec::with_capacity(nodes.len() * ones);
    for node in &nodes {
        active.extend(vocab.node_indices(node));
    }
    let features = NodeFeatures {
        num_nodes: nodes.len(),
        width: vocab.width(),
        ones_per_row: ones,
        active,
    };

    let mut edges = EdgeList::default();
    let mut next_index = 0;
    collect_edges(&tree.root, &mut next_index, None, &mut edges.pairs);
    (features, edges)
}

fn collect_edges(
    node: &UINode,
    next_index: &mut usize,
    parent: Option<usize>,
    pairs: &mut Vec<(usize, usize)>,
) {
    let index = *next_index;
    *next_index += 1;
    if let Some(p) = parent {
        pairs.push((p, index));
        pairs.push((index, p));
    }
    for child in &node.children {
        collect_edges(child, next_index, Some(index), pairs);
    }
}

/// An action in network coordinates: one-hot over registered action types
/// (`a_e`) and one-hot over the state's nodes (`a_i`), kept as indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VectorizedAction {
    pub type_index: usize,
    pub node_index: usize,
    pub num_types: usize,
    pub num_nodes: usize,
}

impl VectorizedAction {
    pub fn type_one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_types];
        v[self.type_index] = 1.0;
        v
    }

    pub fn node_one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_nodes];
        v[self.node_index] = 1.0;
        v
    }
}

/// Encode an action against a concrete state. The node identifier resolves
/// to the first pre-order match, mirroring [`UITree::find_node`].
pub fn vectorize_action(
    tree: &UITree,
    action: &UIAction,
    action_types: &[String],
) -> Result<VectorizedAction, FeaturizeError> {
    let type_index = action_types
        .iter()
        .position(|t| *t == action.action_type)
        .ok_or_else(|| FeaturizeError::UnknownActionType(action.action_type.clone()))?;
    let (node_index, _) = tree
        .find_node(action.node_identifier)
        .ok_or(FeaturizeError::NodeNotInState(action.node_identifier))?;
    Ok(VectorizedAction {
        type_index,
        node_index,
        num_types: action_types.len(),
        num_nodes: tree.node_count(),
    })
}
