//! Graph attention Q-network with hand-written forward and backward passes.
//!
//! The network maps a state graph (sparse one-hot node features plus an
//! undirected edge list) to one Q-value per node and action type. It is two
//! attention layers: the first runs several heads over the raw features and
//! concatenates them through a ReLU; the second runs a single head whose
//! output width is the number of action types. Attention in a head is
//! masked to each node's tree neighborhood plus the node itself.
//!
//! Everything here — projection, masked softmax attention, the backward
//! pass, and the Adam optimizer — is written out explicitly rather than
//! delegated to an autodiff framework, so the gradients can be audited and
//! are themselves checked against central finite differences by
//! [`gradient_check`].

use std::collections::HashMap;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::featurize::{EdgeList, NodeFeatures, VectorizedAction};
use crate::uitree::{identifier_hex, parse_identifier_hex};

/// Attention heads in the first layer.
pub const DEFAULT_NUM_HEADS: usize = 8;
/// Per-head output width of the first layer.
pub const DEFAULT_HIDDEN_PER_HEAD: usize = 10;
/// Negative-side slope of the LeakyReLU on attention logits.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Errors raised by network construction and checkpoint IO.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("checkpoint file error: {0}")]
    Io(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(
        "checkpoint was trained with vocabulary {found:016x}, expected {expected:016x}"
    )]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// One trainable tensor with its accumulated gradient. Values are row-major
/// `rows x cols`; vectors use `cols == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub label: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Parameter {
    fn init(label: &str, rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Parameter {
        let value = (0..rows * cols)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        Parameter {
            label: label.to_owned(),
            rows,
            cols,
            value,
            grad: vec![0.0; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Compressed adjacency over which attention is masked. Each node's
/// neighbor list starts with the node itself, followed by its edge-list
/// neighbors in edge order.
#[derive(Debug, Clone)]
pub struct Graph {
    pub num_nodes: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Graph {
    pub fn new(num_nodes: usize, edges: &EdgeList) -> Graph {
        let mut per_node: Vec<Vec<usize>> = (0..num_nodes).map(|i| vec![i]).collect();
        for &(src, dst) in &edges.pairs {
            per_node[src].push(dst);
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for list in per_node {
            neighbors.extend(list);
            offsets.push(neighbors.len());
        }
        Graph {
            num_nodes,
            offsets,
            neighbors,
        }
    }

    /// Neighborhood of node `i` (self first).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    fn range(&self, i: usize) -> (usize, usize) {
        (self.offsets[i], self.offsets[i + 1])
    }

    fn total_entries(&self) -> usize {
        self.neighbors.len()
    }
}

/// Layer input: either the sparse one-hot feature matrix or a dense
/// activation matrix from the previous layer.
enum Rows<'a> {
    Sparse(&'a NodeFeatures),
    Dense { data: &'a [f64], cols: usize },
}

/// Per-head forward activations kept for the backward pass: projected
/// features, pre-activation attention logits, and attention weights. The
/// latter two are flat arrays parallel to the graph's neighbor entries.
#[derive(Debug, Clone)]
struct HeadCache {
    g: Vec<f64>,
    raw: Vec<f64>,
    alpha: Vec<f64>,
}

/// One attention head: a projection matrix and an attention vector whose
/// first half scores the attending node and second half the attended one.
#[derive(Debug, Clone)]
struct GatHead {
    w: Parameter,
    a: Parameter,
    out_dim: usize,
}

impl GatHead {
    fn new(label: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> GatHead {
        let w_bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let a_bound = (6.0 / (2 * out_dim + 1) as f64).sqrt();
        GatHead {
            w: Parameter::init(&format!("{label}.w"), in_dim, out_dim, w_bound, rng),
            a: Parameter::init(&format!("{label}.a"), 2 * out_dim, 1, a_bound, rng),
            out_dim,
        }
    }

    /// `G = V W`, exploiting that sparse rows are 0/1 indicators and dense
    /// rows are post-ReLU (often zero).
    fn project(&self, input: &Rows) -> Vec<f64> {
        let out = self.out_dim;
        match input {
            Rows::Sparse(features) => {
                let n = features.num_nodes();
                let mut g = vec![0.0; n * out];
                for i in 0..n {
                    for &r in features.active(i) {
                        let w_row = &self.w.value[r * out..(r + 1) * out];
                        let g_row = &mut g[i * out..(i + 1) * out];
                        for c in 0..out {
                            g_row[c] += w_row[c];
                        }
                    }
                }
                g
            }
            Rows::Dense { data, cols } => {
                let n = data.len() / cols;
                let mut g = vec![0.0; n * out];
                for i in 0..n {
                    for k in 0..*cols {
                        let x = data[i * cols + k];
                        if x == 0.0 {
                            continue;
                        }
                        let w_row = &self.w.value[k * out..(k + 1) * out];
                        let g_row = &mut g[i * out..(i + 1) * out];
                        for c in 0..out {
                            g_row[c] += x * w_row[c];
                        }
                    }
                }
                g
            }
        }
    }

    /// Masked attention over the graph: logits `e_ij = LeakyReLU(a_src·g_i
    /// + a_dst·g_j)`, normalized per node with a max-subtracted softmax,
    /// then the attention-weighted sum of projected neighbors.
    fn attend(&self, graph: &Graph, g: &[f64]) -> (HeadCache, Vec<f64>) {
        let out = self.out_dim;
        let n = graph.num_nodes;
        let (a_src, a_dst) = self.a.value.split_at(out);
        let mut src_score = vec![0.0; n];
        let mut dst_score = vec![0.0; n];
        for i in 0..n {
            let g_row = &g[i * out..(i + 1) * out];
            src_score[i] = a_src.iter().zip(g_row).map(|(a, g)| a * g).sum();
            dst_score[i] = a_dst.iter().zip(g_row).map(|(a, g)| a * g).sum();
        }
        let entries = graph.total_entries();
        let mut raw = vec![0.0; entries];
        let mut alpha = vec![0.0; entries];
        let mut output = vec![0.0; n * out];
        for i in 0..n {
            let (lo, hi) = graph.range(i);
            let mut max_logit = f64::NEG_INFINITY;
            for e in lo..hi {
                let j = graph.neighbors[e];
                let r = src_score[i] + dst_score[j];
                raw[e] = r;
                let logit = if r > 0.0 { r } else { LEAKY_SLOPE * r };
                alpha[e] = logit;
                max_logit = max_logit.max(logit);
            }
            let mut denom = 0.0;
            for a in &mut alpha[lo..hi] {
                *a = (*a - max_logit).exp();
                denom += *a;
            }
            let out_row = &mut output[i * out..(i + 1) * out];
            for e in lo..hi {
                alpha[e] /= denom;
                let j = graph.neighbors[e];
                let g_row = &g[j * out..(j + 1) * out];
                for c in 0..out {
                    out_row[c] += alpha[e] * g_row[c];
                }
            }
        }
        (
            HeadCache {
                g: g.to_vec(),
                raw,
                alpha,
            },
            output,
        )
    }

    /// Accumulate parameter gradients for this head given the gradient on
    /// its attention output, and optionally return the gradient on its
    /// input rows (needed only below the top layer).
    fn backward(
        &mut self,
        graph: &Graph,
        input: &Rows,
        cache: &HeadCache,
        d_out: &[f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let out = self.out_dim;
        let n = graph.num_nodes;
        let g = &cache.g;
        let mut d_g = vec![0.0; n * out];
        let mut d_src = vec![0.0; n];
        let mut d_dst = vec![0.0; n];
        let mut d_alpha = Vec::new();
        for i in 0..n {
            let (lo, hi) = graph.range(i);
            let d_out_row = &d_out[i * out..(i + 1) * out];
            d_alpha.clear();
            // Output mix: out_i = sum_j alpha_ij g_j, so each neighbor
            // receives alpha-weighted output gradient and each weight sees
            // d_out · g_j.
            let mut inner = 0.0;
            for e in lo..hi {
                let j = graph.neighbors[e];
                let g_row = &g[j * out..(j + 1) * out];
                let mut da = 0.0;
                for c in 0..out {
                    da += d_out_row[c] * g_row[c];
                    d_g[j * out + c] += cache.alpha[e] * d_out_row[c];
                }
                d_alpha.push(da);
                inner += cache.alpha[e] * da;
            }
            // Softmax backward, then the LeakyReLU slope, split into the
            // source score of `i` and destination scores of the neighbors.
            for e in lo..hi {
                let j = graph.neighbors[e];
                let d_logit = cache.alpha[e] * (d_alpha[e - lo] - inner);
                let slope = if cache.raw[e] > 0.0 { 1.0 } else { LEAKY_SLOPE };
                let d_raw = d_logit * slope;
                d_src[i] += d_raw;
                d_dst[j] += d_raw;
            }
        }
        let (a_src, a_dst) = self.a.value.split_at(out);
        for i in 0..n {
            let g_row = &g[i * out..(i + 1) * out];
            for c in 0..out {
                self.a.grad[c] += d_src[i] * g_row[c];
                self.a.grad[out + c] += d_dst[i] * g_row[c];
                d_g[i * out + c] += d_src[i] * a_src[c] + d_dst[i] * a_dst[c];
            }
        }
        match input {
            Rows::Sparse(features) => {
                for i in 0..n {
                    for &r in features.active(i) {
                        let w_row = &mut self.w.grad[r * out..(r + 1) * out];
                        let d_row = &d_g[i * out..(i + 1) * out];
                        for c in 0..out {
                            w_row[c] += d_row[c];
                        }
                    }
                }
                None
            }
            Rows::Dense { data, cols } => {
                for i in 0..n {
                    let d_row = &d_g[i * out..(i + 1) * out];
                    for k in 0..*cols {
                        let x = data[i * cols + k];
                        if x != 0.0 {
                            let w_row = &mut self.w.grad[k * out..(k + 1) * out];
                            for c in 0..out {
                                w_row[c] += x * d_row[c];
                            }
                        }
                    }
                }
                if want_input {
                    let mut d_in = vec![0.0; n * cols];
                    for i in 0..n {
                        let d_row = &d_g[i * out..(i + 1) * out];
                        for k in 0..*cols {
                            let w_row = &self.w.value[k * out..(k + 1) * out];
                            let mut acc = 0.0;
                            for c in 0..out {
                                acc += d_row[c] * w_row[c];
                            }
                            d_in[i * cols + k] = acc;
                        }
                    }
                    Some(d_in)
                } else {
                    None
                }
            }
        }
    }
}

/// Forward activations of a full network pass, consumed by
/// [`QNetwork::backward`]. `q` is row-major `num_nodes x num_action_types`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    graph: Graph,
    layer1: Vec<HeadCache>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    layer2: HeadCache,
    pub q: Vec<f64>,
}

/// The two-layer attention Q-network.
#[derive(Debug, Clone)]
pub struct QNetwork {
    layer1: Vec<GatHead>,
    layer2: GatHead,
    pub input_dim: usize,
    pub num_heads: usize,
    pub hidden_per_head: usize,
    pub num_action_types: usize,
}

impl QNetwork {
    /// Standard shape: [`DEFAULT_NUM_HEADS`] heads of width
    /// [`DEFAULT_HIDDEN_PER_HEAD`] feeding a single second-layer head with
    /// one output per action type. Initialization is uniform in
    /// `±sqrt(6 / (fan_in + fan_out))`, drawn deterministically from `seed`.
    pub fn new(input_dim: usize, num_action_types: usize, seed: u64) -> QNetwork {
        QNetwork::with_shape(
            input_dim,
            DEFAULT_NUM_HEADS,
            DEFAULT_HIDDEN_PER_HEAD,
            num_action_types,
            seed,
        )
    }

    pub fn with_shape(
        input_dim: usize,
        num_heads: usize,
        hidden_per_head: usize,
        num_action_types: usize,
        seed: u64,
    ) -> QNetwork {
        assert!(num_heads > 0 && hidden_per_head > 0 && num_action_types > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer1 = (0..num_heads)
            .map(|h| GatHead::new(&format!("l1.h{h}"), input_dim, hidden_per_head, &mut rng))
            .collect();
        let layer2 = GatHead::new(
            "l2.h0",
            num_heads * hidden_per_head,
            num_action_types,
            &mut rng,
        );
        QNetwork {
            layer1,
            layer2,
            input_dim,
            num_heads,
            hidden_per_head,
            num_action_types,
        }
    }

    fn hidden_dim(&self) -> usize {
        self.num_heads * self.hidden_per_head
    }

    /// Parameters in fixed traversal order (layer 1 head by head, then
    /// layer 2). The optimizer, checkpoints, and the gradient checker all
    /// rely on this order being stable.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut params = Vec::with_capacity(2 * self.layer1.len() + 2);
        for head in &self.layer1 {
            params.push(&head.w);
            params.push(&head.a);
        }
        params.push(&self.layer2.w);
        params.push(&self.layer2.a);
        params
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut params = Vec::with_capacity(2 * self.layer1.len() + 2);
        for head in &mut self.layer1 {
            params.push(&mut head.w);
            params.push(&mut head.a);
        }
        params.push(&mut self.layer2.w);
        params.push(&mut self.layer2.a);
        params
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Full forward pass keeping every activation needed for backward.
    pub fn forward_cached(&self, features: &NodeFeatures, edges: &EdgeList) -> ForwardCache {
        assert_eq!(
            features.width(),
            self.input_dim,
            "feature width does not match network input"
        );
        let n = features.num_nodes();
        let graph = Graph::new(n, edges);
        let hidden_dim = self.hidden_dim();
        let mut layer1_caches = Vec::with_capacity(self.layer1.len());
        let mut hidden_pre = vec![0.0; n * hidden_dim];
        for (h, head) in self.layer1.iter().enumerate() {
            let g = head.project(&Rows::Sparse(features));
            let (cache, out) = head.attend(&graph, &g);
            for i in 0..n {
                let src = &out[i * self.hidden_per_head..(i + 1) * self.hidden_per_head];
                let dst_start = i * hidden_dim + h * self.hidden_per_head;
                hidden_pre[dst_start..dst_start + self.hidden_per_head].copy_from_slice(src);
            }
            layer1_caches.push(cache);
        }
        let hidden: Vec<f64> = hidden_pre.iter().map(|&x| x.max(0.0)).collect();
        let g2 = self.layer2.project(&Rows::Dense {
            data: &hidden,
            cols: hidden_dim,
        });
        let (layer2_cache, q) = self.layer2.attend(&graph, &g2);
        ForwardCache {
            graph,
            layer1: layer1_caches,
            hidden_pre,
            hidden,
            layer2: layer2_cache,
            q,
        }
    }

    /// Q-values for every (node, action type) pair of a state, row-major
    /// by node.
    pub fn forward(&self, features: &NodeFeatures, edges: &EdgeList) -> Vec<f64> {
        self.forward_cached(features, edges).q
    }

    /// Q-value of one vectorized action.
    pub fn q_value(&self, features: &NodeFeatures, edges: &EdgeList, action: &VectorizedAction) -> f64 {
        let q = self.forward(features, edges);
        q[action.node_index * self.num_action_types + action.type_index]
    }

    /// Accumulate parameter gradients for criterion gradient `d_q` (same
    /// shape as `cache.q`).
    pub fn backward(&mut self, features: &NodeFeatures, cache: &ForwardCache, d_q: &[f64]) {
        assert_eq!(d_q.len(), cache.q.len());
        let hidden_dim = self.hidden_dim();
        let n = cache.graph.num_nodes;
        let d_hidden = self
            .layer2
            .backward(
                &cache.graph,
                &Rows::Dense {
                    data: &cache.hidden,
                    cols: hidden_dim,
                },
                &cache.layer2,
                d_q,
                true,
            )
            .expect("dense backward returns an input gradient");
        // ReLU gate between the layers.
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&cache.hidden_pre)
            .map(|(&d, &pre)| if pre > 0.0 { d } else { 0.0 })
            .collect();
        let per_head = self.hidden_per_head;
        for (h, head) in self.layer1.iter_mut().enumerate() {
            let mut d_out = vec![0.0; n * per_head];
            for i in 0..n {
                let src_start = i * hidden_dim + h * per_head;
                d_out[i * per_head..(i + 1) * per_head]
                    .copy_from_slice(&d_pre[src_start..src_start + per_head]);
            }
            head.backward(
                &cache.graph,
                &Rows::Sparse(features),
                &cache.layer1[h],
                &d_out,
                false,
            );
        }
    }

    /// Mean squared error of predicted Q-values against `batch` targets,
    /// with gradients accumulated into the parameters. States appearing in
    /// several batch items (keyed by `state_key`) are forwarded only once.
    pub fn loss_and_gradients(&mut self, batch: &[QTarget]) -> f64 {
        assert!(!batch.is_empty(), "loss over an empty batch");
        let b = batch.len() as f64;
        let mut loss = 0.0;
        for (first, positions) in group_by_state(batch) {
            let item = &batch[first];
            let cache = self.forward_cached(item.features, item.edges);
            let mut d_q = vec![0.0; cache.q.len()];
            for &p in &positions {
                let target = &batch[p];
                let slot =
                    target.action.node_index * self.num_action_types + target.action.type_index;
                let residual = target.target - cache.q[slot];
                loss += residual * residual;
                d_q[slot] += -2.0 * residual / b;
            }
            self.backward(item.features, &cache, &d_q);
        }
        loss / b
    }

    /// The loss of [`QNetwork::loss_and_gradients`] without touching
    /// gradients (used by the finite-difference checker).
    pub fn loss_only(&self, batch: &[QTarget]) -> f64 {
        assert!(!batch.is_empty(), "loss over an empty batch");
        let mut loss = 0.0;
        for (first, positions) in group_by_state(batch) {
            let item = &batch[first];
            let q = self.forward(item.features, item.edges);
            for &p in &positions {
                let target = &batch[p];
                let slot =
                    target.action.node_index * self.num_action_types + target.action.type_index;
                let residual = target.target - q[slot];
                loss += residual * residual;
            }
        }
        loss / batch.len() as f64
    }
}

/// One supervised Q-target: a state (by reference), an action in it, and
/// the regression target. `state_key` identifies the state for
/// deduplication; any scheme works as long as equal states share a key.
pub struct QTarget<'a> {
    pub features: &'a NodeFeatures,
    pub edges: &'a EdgeList,
    pub state_key: u64,
    pub action: VectorizedAction,
    pub target: f64,
}

/// Group batch positions by state key, preserving first-appearance order
/// so accumulation is deterministic.
fn group_by_state(batch: &[QTarget]) -> Vec<(usize, Vec<usize>)> {
    let mut order: Vec<u64> = Vec::new();
    let mut groups: HashMap<u64, Vec<usize>> = HashMap::new();
    for (p, item) in batch.iter().enumerate() {
        let slot = groups.entry(item.state_key).or_insert_with(|| {
            order.push(item.state_key);
            Vec::new()
        });
        slot.push(p);
    }
    order
        .into_iter()
        .map(|key| {
            let positions = groups.remove(&key).expect("key recorded on insert");
            (positions[0], positions)
        })
        .collect()
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators, aligned with the network's parameter
/// traversal order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &QNetwork, config: AdamConfig) -> AdamState {
        let shapes: Vec<usize> = net.parameters().iter().map(|p| p.len()).collect();
        AdamState {
            config,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one bias-corrected Adam update from the accumulated gradients,
    /// then clear them.
    pub fn step(&mut self, net: &mut QNetwork) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (slot, param) in net.parameters_mut().into_iter().enumerate() {
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for idx in 0..param.len() {
                let g = param.grad[idx];
                m[idx] = c.beta1 * m[idx] + (1.0 - c.beta1) * g;
                v[idx] = c.beta2 * v[idx] + (1.0 - c.beta2) * g * g;
                let m_hat = m[idx] / bc1;
                let v_hat = v[idx] / bc2;
                param.value[idx] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                param.grad[idx] = 0.0;
            }
        }
    }
}

/// Finite-difference agreement of one parameter block.
#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub label: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Verify analytic gradients against central finite differences with step
/// `1e-5`. Up to `samples_per_block` coordinates are probed per parameter
/// block (all of them when the block is small), sampled without
/// replacement from `seed`. The relative error denominator is floored so
/// near-zero gradient pairs compare absolutely.
pub fn gradient_check(
    net: &mut QNetwork,
    batch: &[QTarget],
    samples_per_block: usize,
    seed: u64,
    tolerance: f64,
) -> GradCheckReport {
    const STEP: f64 = 1e-5;
    const DENOM_FLOOR: f64 = 1e-6;
    net.zero_grads();
    net.loss_and_gradients(batch);
    let analytic: Vec<Vec<f64>> = net.parameters().iter().map(|p| p.grad.clone()).collect();
    let labels: Vec<String> = net.parameters().iter().map(|p| p.label.clone()).collect();
    net.zero_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(analytic.len());
    let mut overall: f64 = 0.0;
    for (slot, grads) in analytic.iter().enumerate() {
        let picks = sample_without_replacement(grads.len(), samples_per_block, &mut rng);
        let mut max_rel: f64 = 0.0;
        for &idx in &picks {
            let original = net.parameters()[slot].value[idx];
            net.parameters_mut()[slot].value[idx] = original + STEP;
            let loss_plus = net.loss_only(batch);
            net.parameters_mut()[slot].value[idx] = original - STEP;
            let loss_minus = net.loss_only(batch);
            net.parameters_mut()[slot].value[idx] = original;
            let fd = (loss_plus - loss_minus) / (2.0 * STEP);
            let g = grads[idx];
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(DENOM_FLOOR);
            max_rel = max_rel.max(rel);
        }
        overall = overall.max(max_rel);
        blocks.push(BlockCheck {
            label: labels[slot].clone(),
            checked: picks.len(),
            max_rel_error: max_rel,
        });
    }
    GradCheckReport {
        blocks,
        max_rel_error: overall,
        tolerance,
        passed: overall < tolerance,
    }
}

fn sample_without_replacement(len: usize, want: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if want >= len {
        return (0..len).collect();
    }
    // Partial Fisher-Yates: the first `want` positions of a shuffle.
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..want {
        let j = rng.random_range(i..len);
        pool.swap(i, j);
    }
    pool.truncate(want);
    pool
}

// ---------------------------------------------------------------------------
// Checkpoints: a single JSON document with shapes, full-precision values,
// and the fingerprint of the vocabulary the network was trained against.
// ---------------------------------------------------------------------------

const CHECKPOINT_FORMAT: &str = "guiq-qnet";
const CHECKPOINT_VERSION: u64 = 1;

/// Write the network and its vocabulary fingerprint to `path` as JSON.
pub fn save_checkpoint(net: &QNetwork, vocab_fingerprint: u64, path: &Path) -> Result<(), NnError> {
    save_checkpoint_tagged(net, vocab_fingerprint, None, path)
}

/// Like [`save_checkpoint`], additionally embedding a run-configuration
/// fingerprint for provenance. Loading ignores the extra key.
pub fn save_checkpoint_tagged(
    net: &QNetwork,
    vocab_fingerprint: u64,
    config_fingerprint: Option<u64>,
    path: &Path,
) -> Result<(), NnError> {
    let parameters: Vec<Value> = net
        .parameters()
        .iter()
        .map(|p| {
            json!({
                "label": p.label,
                "rows": p.rows,
                "cols": p.cols,
                "values": p.value,
            })
        })
        .collect();
    let mut doc = json!({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_dim": net.input_dim,
        "num_heads": net.num_heads,
        "hidden_per_head": net.hidden_per_head,
        "num_action_types": net.num_action_types,
        "vocab_fingerprint": identifier_hex(vocab_fingerprint),
        "parameters": parameters,
    });
    if let Some(fp) = config_fingerprint {
        doc.as_object_mut()
            .expect("checkpoint document is an object")
            .insert("config".to_owned(), Value::String(identifier_hex(fp)));
    }
    std::fs::write(path, doc.to_string()).map_err(|e| NnError::Io(e.to_string()))
}

/// Load a checkpoint, returning the network and the stored vocabulary
/// fingerprint. When `expected_fingerprint` is given, a mismatch is an
/// error — Q-values from a network paired with the wrong vocabulary would
/// be silently meaningless.
pub fn load_checkpoint(
    path: &Path,
    expected_fingerprint: Option<u64>,
) -> Result<(QNetwork, u64), NnError> {
    let text = std::fs::read_to_string(path).map_err(|e| NnError::Io(e.to_string()))?;
    let doc: Value =
        serde_json::from_str(&text).map_err(|e| NnError::Format(format!("bad JSON: {e}")))?;
    if doc.get("format").and_then(Value::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(NnError::Format("not a network checkpoint".to_owned()));
    }
    if doc.get("version").and_then(Value::as_u64) != Some(CHECKPOINT_VERSION) {
        return Err(NnError::Format("unsupported checkpoint version".to_owned()));
    }
    let dim = |name: &str| -> Result<usize, NnError> {
        doc.get(name)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| NnError::Format(format!("missing field {name:?}")))
    };
    let fingerprint = doc
        .get("vocab_fingerprint")
        .and_then(Value::as_str)
        .and_then(parse_identifier_hex)
        .ok_or_else(|| NnError::Format("missing or bad vocab_fingerprint".to_owned()))?;
    if let Some(expected) = expected_fingerprint {
        if expected != fingerprint {
            return Err(NnError::FingerprintMismatch {
                expected,
                found: fingerprint,
            });
        }
    }
    let mut net = QNetwork::with_shape(
        dim("input_dim")?,
        dim("num_heads")?,
        dim("hidden_per_head")?,
        dim("num_action_types")?,
        0,
    );
    let stored = doc
        .get("parameters")
        .and_then(Value::as_array)
        .ok_or_else(|| NnError::Format("missing parameters".to_owned()))?;
    let params = net.parameters_mut();
    if stored.len() != params.len() {
        return Err(NnError::Shape(format!(
            "checkpoint has {} parameter blocks, network expects {}",
            stored.len(),
            params.len()
        )));
    }
    for (param, entry) in params.into_iter().zip(stored) {
        let label = entry.get("label").and_then(Value::as_str).unwrap_or("");
        if label != param.label {
            return Err(NnError::Shape(format!(
                "parameter block {:?} found where {:?} was expected",
                label, param.label
            )));
        }
        let values = entry
            .get("values")
            .and_then(Value::as_array)
            .ok_or_else(|| NnError::Format(format!("block {label:?} missing values")))?;
        if values.len() != param.len() {
            return Err(NnError::Shape(format!(
                "block {label:?} holds {} values, expected {}",
                values.len(),
                param.len()
            )));
        }
        for (slot, value) in param.value.iter_mut().zip(values) {
            *slot = value
                .as_f64()
                .ok_or_else(|| NnError::Format(format!("non-numeric value in {label:?}")))?;
        }
    }
    Ok((net, fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A 6-node synthetic graph: a chain 0-1-2-3 with 4 and 5 hanging off
    /// node 1, features of width 12 with 3 active columns per node.
    fn synthetic_state() -> (NodeFeatures, EdgeList) {
        let active = vec![
            vec![0, 4, 8],
            vec![1, 4, 9],
            vec![2, 5, 10],
            vec![3, 6, 11],
            vec![0, 7, 10],
            vec![1, 5, 8],
        ];
        let features = NodeFeatures::from_active(12, 3, active).unwrap();
        let mut pairs = Vec::new();
        for (a, b) in [(0, 1), (1, 2), (2, 3), (1, 4), (1, 5)] {
            pairs.push((a, b));
            pairs.push((b, a));
        }
        (features, EdgeList { pairs })
    }

    fn action(node: usize, ty: usize, num_types: usize, num_nodes: usize) -> VectorizedAction {
        VectorizedAction {
            type_index: ty,
            node_index: node,
            num_types,
            num_nodes,
        }
    }

    #[test]
    fn graph_neighbor_lists_start_with_self() {
        let edges = EdgeList {
            pairs: vec![(0, 1), (1, 0), (1, 2), (2, 1)],
        };
        let graph = Graph::new(3, &edges);
        assert_eq!(graph.neighbors(0), &[0, 1]);
        assert_eq!(graph.neighbors(1), &[1, 0, 2]);
        assert_eq!(graph.neighbors(2), &[2, 1]);
        assert_eq!(graph.total_entries(), 7);
    }

    #[test]
    fn isolated_node_output_is_its_own_projection() {
        // With no neighbors, attention collapses to the node itself, so the
        // network is just two projections with a ReLU in between.
        let features = NodeFeatures::from_active(6, 2, vec![vec![1, 3]]).unwrap();
        let edges = EdgeList::default();
        let net = QNetwork::with_shape(6, 2, 3, 1, 11);
        let q = net.forward(&features, &edges);
        assert_eq!(q.len(), 1);

        let mut expected = 0.0;
        let mut offset = 0;
        for head in &net.layer1 {
            for c in 0..head.out_dim {
                // g = row 1 + row 3 of W.
                let g = head.w.value[head.out_dim + c] + head.w.value[3 * head.out_dim + c];
                let hidden = g.max(0.0);
                expected += hidden_weight(&net.layer2, offset + c) * hidden;
            }
            offset += head.out_dim;
        }
        assert!((q[0] - expected).abs() < 1e-12, "{} vs {expected}", q[0]);

        fn hidden_weight(layer2: &GatHead, k: usize) -> f64 {
            layer2.w.value[k * layer2.out_dim]
        }
    }

    #[test]
    fn flat_attention_scores_average_the_neighborhood() {
        // Zeroing the attention vectors makes every logit zero, so weights
        // are uniform over each neighborhood.
        let (features, edges) = synthetic_state();
        let mut net = QNetwork::with_shape(12, 1, 4, 1, 3);
        for p in net.parameters_mut() {
            if p.label.ends_with(".a") {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let head = &net.layer1[0];
        let graph = Graph::new(features.num_nodes(), &edges);
        let g = head.project(&Rows::Sparse(&features));
        let (_, out) = head.attend(&graph, &g);
        let out_dim = head.out_dim;
        // Node 2 neighbors: itself, 1, 3.
        for c in 0..out_dim {
            let mean = (g[2 * out_dim + c] + g[out_dim + c] + g[3 * out_dim + c]) / 3.0;
            assert!((out[2 * out_dim + c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_follow_the_softmax_closed_form() {
        // One-dimensional head rigged so node 0's logits over (self, 1) are
        // (ln 3, 0): the attention weights must be (3/4, 1/4).
        let features = NodeFeatures::from_active(2, 1, vec![vec![0], vec![1]]).unwrap();
        let edges = EdgeList {
            pairs: vec![(0, 1), (1, 0)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = GatHead::new("t.h0", 2, 1, &mut rng);
        let ln3 = 3.0_f64.ln();
        head.w.value = vec![ln3, 0.0]; // g0 = ln 3, g1 = 0
        head.a.value = vec![0.0, 1.0]; // logits depend only on the target node
        let graph = Graph::new(2, &edges);
        let g = head.project(&Rows::Sparse(&features));
        let (cache, out) = head.attend(&graph, &g);
        assert!((cache.alpha[0] - 0.75).abs() < 1e-12);
        assert!((cache.alpha[1] - 0.25).abs() < 1e-12);
        assert!((out[0] - 0.75 * ln3).abs() < 1e-12);
    }

    #[test]
    fn zero_network_is_a_stationary_point() {
        let (features, edges) = synthetic_state();
        let mut net = QNetwork::with_shape(12, 2, 3, 1, 5);
        for p in net.parameters_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let q = net.forward(&features, &edges);
        assert!(q.iter().all(|&v| v == 0.0));

        let batch = [
            QTarget {
                features: &features,
                edges: &edges,
                state_key: 1,
                action: action(0, 0, 1, 6),
                target: 1.0,
            },
            QTarget {
                features: &features,
                edges: &edges,
                state_key: 1,
                action: action(3, 0, 1, 6),
                target: 2.0,
            },
        ];
        let loss = net.loss_and_gradients(&batch);
        assert!((loss - 2.5).abs() < 1e-12, "loss {loss}");
        // Every gradient path runs through a zero weight or a zero hidden
        // activation, so the all-zero network cannot move.
        for p in net.parameters() {
            assert!(p.grad.iter().all(|&g| g == 0.0), "block {}", p.label);
        }
    }

    #[test]
    fn dense_and_sparse_projections_agree() {
        let (features, _) = synthetic_state();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = GatHead::new("t.h0", 12, 5, &mut rng);
        let sparse = head.project(&Rows::Sparse(&features));
        let mut dense_rows = Vec::new();
        for i in 0..features.num_nodes() {
            dense_rows.extend(features.dense_row(i));
        }
        let dense = head.project(&Rows::Dense {
            data: &dense_rows,
            cols: 12,
        });
        assert_eq!(sparse, dense);
    }

    #[test]
    fn finite_differences_validate_the_backward_pass() {
        let (features_a, edges_a) = synthetic_state();
        // A second, smaller state so the batch covers deduplication and
        // multiple graphs.
        let features_b =
            NodeFeatures::from_active(12, 3, vec![vec![0, 5, 9], vec![2, 4, 11], vec![3, 7, 8]])
                .unwrap();
        let edges_b = EdgeList {
            pairs: vec![(0, 1), (1, 0), (1, 2), (2, 1)],
        };
        let mut net = QNetwork::with_shape(12, 3, 4, 2, 7);
        let batch = [
            QTarget {
                features: &features_a,
                edges: &edges_a,
                state_key: 1,
                action: action(0, 0, 2, 6),
                target: 0.7,
            },
            QTarget {
                features: &features_a,
                edges: &edges_a,
                state_key: 1,
                action: action(4, 1, 2, 6),
                target: -0.3,
            },
            QTarget {
                features: &features_b,
                edges: &edges_b,
                state_key: 2,
                action: action(2, 0, 2, 3),
                target: 1.2,
            },
            QTarget {
                features: &features_b,
                edges: &edges_b,
                state_key: 2,
                action: action(1, 1, 2, 3),
                target: 0.0,
            },
        ];
        let report = gradient_check(&mut net, &batch, 64, 13, 1e-4);
        assert!(
            report.passed,
            "max relative error {} across {:?}",
            report.max_rel_error,
            report
                .blocks
                .iter()
                .map(|b| (b.label.clone(), b.max_rel_error))
                .collect::<Vec<_>>()
        );
        // Every block was actually probed.
        assert!(report.blocks.iter().all(|b| b.checked > 0));
        assert_eq!(report.blocks.len(), 3 * 2 + 2);
    }

    #[test]
    fn default_shape_matches_the_reference_architecture() {
        let net = QNetwork::new(30, 1, 0);
        assert_eq!(net.layer1.len(), 8);
        for head in &net.layer1 {
            assert_eq!((head.w.rows, head.out_dim), (30, 10));
            assert_eq!(head.w.len(), 300);
            assert_eq!(head.a.len(), 20);
        }
        assert_eq!((net.layer2.w.rows, net.layer2.out_dim), (80, 1));
        assert_eq!(net.num_parameters(), 8 * (300 + 20) + 80 + 2);
    }

    #[test]
    fn initialization_is_seeded_and_bounded() {
        let a = QNetwork::new(20, 1, 42);
        let b = QNetwork::new(20, 1, 42);
        let c = QNetwork::new(20, 1, 43);
        let flat = |net: &QNetwork| -> Vec<f64> {
            net.parameters().iter().flat_map(|p| p.value.clone()).collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
        for head in &a.layer1 {
            let w_bound = (6.0 / (20 + 10) as f64).sqrt();
            assert!(head.w.value.iter().all(|v| v.abs() <= w_bound));
            let a_bound = (6.0 / 21.0_f64).sqrt();
            assert!(head.a.value.iter().all(|v| v.abs() <= a_bound));
        }
    }

    #[test]
    fn adam_first_step_moves_by_the_signed_learning_rate() {
        let mut net = QNetwork::with_shape(4, 1, 2, 1, 1);
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let before = net.parameters()[0].value[0];
        {
            let mut params = net.parameters_mut();
            params[0].grad[0] = 3.7;
            params[0].grad[1] = -0.2;
        }
        let before1 = net.parameters()[0].value[1];
        adam.step(&mut net);
        // With fresh moments the bias-corrected update is exactly
        // lr * g / (|g| + eps), i.e. one learning rate in the gradient's
        // direction (up to eps).
        let after = net.parameters()[0].value[0];
        let expected = before - 1e-2 * 3.7 / (3.7 + 1e-8);
        assert!((after - expected).abs() < 1e-15);
        let after1 = net.parameters()[0].value[1];
        let expected1 = before1 + 1e-2 * 0.2 / (0.2 + 1e-8);
        assert!((after1 - expected1).abs() < 1e-15);
        assert_eq!(adam.steps_taken(), 1);
        assert!(net.parameters()[0].grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn forward_is_equivariant_under_node_relabeling() {
        let (features, edges) = synthetic_state();
        let net = QNetwork::with_shape(12, 4, 3, 2, 21);
        let q = net.forward(&features, &edges);

        // Reverse the node order.
        let n = features.num_nodes();
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted_active: Vec<Vec<usize>> = (0..n)
            .map(|new| {
                let old = perm.iter().position(|&p| p == new).unwrap();
                features.active(old).to_vec()
            })
            .collect();
        let permuted = NodeFeatures::from_active(12, 3, permuted_active).unwrap();
        let permuted_edges = EdgeList {
            pairs: edges.pairs.iter().map(|&(a, b)| (perm[a], perm[b])).collect(),
        };
        let q_perm = net.forward(&permuted, &permuted_edges);
        let types = net.num_action_types;
        for i in 0..n {
            for t in 0..types {
                let delta = (q[i * types + t] - q_perm[perm[i] * types + t]).abs();
                assert!(delta < 1e-9, "node {i} type {t} differs by {delta}");
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_and_enforce_the_fingerprint() {
        let net = QNetwork::with_shape(12, 2, 3, 1, 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qnet.json");
        save_checkpoint(&net, 0xfeed_beef_dead_cafe, &path).unwrap();

        let (loaded, fp) = load_checkpoint(&path, Some(0xfeed_beef_dead_cafe)).unwrap();
        assert_eq!(fp, 0xfeed_beef_dead_cafe);
        for (a, b) in loaded.parameters().iter().zip(net.parameters()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.value, b.value, "block {} must survive bitwise", a.label);
        }
        let (features, edges) = synthetic_state();
        assert_eq!(loaded.forward(&features, &edges), net.forward(&features, &edges));

        match load_checkpoint(&path, Some(1)) {
            Err(NnError::FingerprintMismatch { expected: 1, found }) => {
                assert_eq!(found, 0xfeed_beef_dead_cafe)
            }
            other => panic!("expected fingerprint mismatch, got {other:?}"),
        }
        // Loading without an expectation still reports the stored value.
        let (_, fp) = load_checkpoint(&path, None).unwrap();
        assert_eq!(fp, 0xfeed_beef_dead_cafe);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"format\":\"guiq-qnet\",\"version\":99}").unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(NnError::Format(_))
        ));
        std::fs::write(&path, "not json").unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(NnError::Format(_))
        ));
    }

    #[test]
    fn loss_gradients_accumulate_until_cleared() {
        let (features, edges) = synthetic_state();
        let mut net = QNetwork::with_shape(12, 2, 3, 1, 31);
        let batch = [QTarget {
            features: &features,
            edges: &edges,
            state_key: 1,
            action: action(2, 0, 1, 6),
            target: 1.0,
        }];
        net.loss_and_gradients(&batch);
        let once: Vec<f64> = net.parameters()[0].grad.clone();
        net.loss_and_gradients(&batch);
        let twice: Vec<f64> = net.parameters()[0].grad.clone();
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        net.zero_grads();
        assert!(net.parameters()[0].grad.iter().all(|&g| g == 0.0));
    }
}
