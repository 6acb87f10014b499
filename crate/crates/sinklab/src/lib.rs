// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-sink mechanics on a miniature multi-head causal decoder.
//!
//! sinklab builds a small, fully deterministic decoder-only transformer and
//! instruments it for experiments on attention sinks: which tokens get
//! flagged as sinks under different criteria, what sink key/value
//! representations carry, and what happens when the forward pass is modified
//! at inference time. The interventions include zeroing dominant sink key
//! dimensions, head pruning, gated rotation of head outputs toward the mean
//! sink value direction, one-shot causal-mask relaxation for sink queries,
//! and sink-query-guided token pruning.
//!
//! Everything is 64-bit and runs in a fixed accumulation order, so repeated
//! runs with the same seed are byte-identical; this makes tight numerical
//! invariants assertable and experiment reports reproducible.
//!
//! The `examples/` directory contains one runnable program per capability;
//! the `sinklab` binary exposes the same experiments as subcommands.

pub mod cli;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod interventions;
pub mod numerics;
pub mod report;
pub mod rng;
pub mod sink_detect;

pub use decoder::{
    attention_naive_oracle, AttentionState, DecodeCache, DecoderConfig, ForwardRecord,
    HiddenStates, LayerWeights, Model, TokenLayout,
};
pub use error::{Error, Result};
pub use harness::SyntheticSpec;
pub use interventions::{Hooks, InterventionConfig};
pub use numerics::Matrix;
pub use sink_detect::{Criterion, DetectionParams, SinkSet};
