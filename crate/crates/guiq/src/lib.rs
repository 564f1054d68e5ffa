//! Batch reinforcement learning for functional GUI testing.
//!
//! The crate trains a graph-attention Q-network from offline episodes of
//! random interaction with a deterministic GUI simulator, then drives the
//! GUI with greedy or temperature-sampled policies derived from the learned
//! Q-function. The pipeline is organized as a chain of small modules:
//!
//! * [`uitree`] — symbolic GUI states (accessibility trees), canonical
//!   serialization, hashing, action enumeration.
//! * [`featurize`] — vocabulary construction and one-hot graph encoding.
//! * [`env`] — the deterministic synthetic GUI simulator and built-in apps.
//! * [`data`] — episode collection, storage, cropping, training-set
//!   assembly, k-fold splits.
//! * [`nn`] — the graph-attention Q-network with hand-derived exact
//!   gradients and the Adam optimizer.
//! * [`qlearn`] — batch Q-learning with a periodically synced target
//!   network.
//! * [`policy`] — greedy / temperature-sampling / random policies and the
//!   hash-table Q-learning baseline.
//! * [`eval`] — policy evaluation, temperature sweeps, cross-validation,
//!   and the exact hitting-time oracle.
//! * [`config`] — run configuration shared by the command-line interface.
//! * [`cli`] — the command-line pipelines.

pub mod cli;
pub mod config;
pub mod data;
pub mod env;
pub mod eval;
pub mod featurize;
pub mod nn;
pub mod policy;
pub mod qlearn;
pub mod uitree;
