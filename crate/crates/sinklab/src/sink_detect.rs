// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sink-token identification and outlier-dimension statistics.
//!
//! Two criteria are implemented. The LLM criterion flags a token when its
//! largest absolute activation exceeds `max(abs_floor, median_mult * m)`,
//! where `m` is the median absolute value over every scalar entry of the
//! layer (strict `>`). The VLM criterion flags a token when the largest
//! absolute activation on a fixed set of sink dimensions, normalized by the
//! token's RMS, reaches `tau` (inclusive `>=`). Detection always runs on
//! the hidden states entering a layer.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::decoder::{AttentionState, HiddenStates};
use crate::error::{Error, Result};
use crate::numerics::{median_abs, rms};

/// Which identification rule produced a [`SinkSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Llm,
    Vlm,
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Criterion::Llm => write!(f, "llm"),
            Criterion::Vlm => write!(f, "vlm"),
        }
    }
}

/// Thresholds for both sink criteria.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionParams {
    #[serde(default = "default_abs_floor")]
    pub llm_abs_floor: f64,
    #[serde(default = "default_median_mult")]
    pub llm_median_mult: f64,
    #[serde(default = "default_tau")]
    pub vlm_tau: f64,
    /// Hidden dimensions treated as sink dimensions by the VLM criterion.
    #[serde(default)]
    pub sink_dims: Vec<usize>,
}

fn default_abs_floor() -> f64 {
    100.0
}
fn default_median_mult() -> f64 {
    1000.0
}
fn default_tau() -> f64 {
    20.0
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            llm_abs_floor: default_abs_floor(),
            llm_median_mult: default_median_mult(),
            vlm_tau: default_tau(),
            sink_dims: Vec::new(),
        }
    }
}

impl DetectionParams {
    pub fn validate(&self) -> Result<()> {
        if self.llm_abs_floor <= 0.0 || self.llm_median_mult <= 0.0 || self.vlm_tau <= 0.0 {
            return Err(Error::Config(
                "detection thresholds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Rule for classifying a hidden dimension as an outlier dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutlierCriterion {
    #[serde(default = "default_magnitude")]
    pub magnitude_threshold: f64,
    /// Fraction of layers that must carry an exceeding activation (strict).
    #[serde(default = "default_layer_fraction")]
    pub layer_fraction: f64,
    /// Fraction of tokens that must carry an exceeding activation (strict).
    #[serde(default = "default_token_fraction")]
    pub token_fraction: f64,
    /// Minimum number of sequences in which the dimension must qualify.
    #[serde(default = "default_quorum")]
    pub sequence_quorum: usize,
}

fn default_magnitude() -> f64 {
    6.0
}
fn default_layer_fraction() -> f64 {
    0.25
}
fn default_token_fraction() -> f64 {
    0.06
}
fn default_quorum() -> usize {
    90
}

impl Default for OutlierCriterion {
    fn default() -> Self {
        Self {
            magnitude_threshold: default_magnitude(),
            layer_fraction: default_layer_fraction(),
            token_fraction: default_token_fraction(),
            sequence_quorum: default_quorum(),
        }
    }
}

/// Sink tokens detected at one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinkSet {
    pub layer: usize,
    /// Flagged token positions, strictly increasing.
    pub token_indices: Vec<usize>,
    pub criterion: Criterion,
    /// Criterion value for each flagged token, aligned with `token_indices`.
    pub triggers: Vec<f64>,
    /// Dimension responsible for each trigger value.
    pub trigger_dims: Vec<usize>,
    /// Tokens skipped by the VLM criterion because their RMS was zero.
    #[serde(default)]
    pub zero_rms_tokens: usize,
}

impl SinkSet {
    pub fn empty(layer: usize, criterion: Criterion) -> Self {
        Self {
            layer,
            token_indices: Vec::new(),
            criterion,
            triggers: Vec::new(),
            trigger_dims: Vec::new(),
            zero_rms_tokens: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.token_indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.token_indices.len()
    }

    pub fn contains(&self, token: usize) -> bool {
        self.token_indices.binary_search(&token).is_ok()
    }
}

/// Per-(layer, head) sink scores.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SinkScoreTable {
    pub entries: Vec<SinkScoreEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinkScoreEntry {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

/// Largest absolute entry of a row and the dimension carrying it.
fn max_abs_dim(row: &[f64]) -> (f64, usize) {
    let mut best = 0.0;
    let mut dim = 0;
    for (d, &v) in row.iter().enumerate() {
        if v.abs() > best {
            best = v.abs();
            dim = d;
        }
    }
    (best, dim)
}

/// LLM criterion: a token is a sink when its peak absolute activation
/// strictly exceeds `max(abs_floor, median_mult * median(|entries|))`,
/// with the median taken over all scalar entries of the layer.
pub fn detect_sinks_llm(
    states: &crate::numerics::Matrix,
    layer: usize,
    params: &DetectionParams,
) -> SinkSet {
    let mut set = SinkSet::empty(layer, Criterion::Llm);
    if states.rows() == 0 || states.cols() == 0 {
        return set;
    }
    let median = median_abs(states.data()).expect("nonempty layer");
    let threshold = params.llm_abs_floor.max(params.llm_median_mult * median);
    for i in 0..states.rows() {
        let (peak, dim) = max_abs_dim(states.row(i));
        if peak > threshold {
            set.token_indices.push(i);
            set.triggers.push(peak);
            set.trigger_dims.push(dim);
        }
    }
    set
}

/// VLM criterion: a token is a sink when the largest `|x[d]| / rms(x)` over
/// the configured sink dimensions reaches `tau`. Zero-RMS tokens are
/// counted and treated as non-sinks.
pub fn detect_sinks_vlm(
    states: &crate::numerics::Matrix,
    layer: usize,
    params: &DetectionParams,
) -> Result<SinkSet> {
    if params.sink_dims.is_empty() {
        return Err(Error::Config(
            "vlm criterion requires a nonempty sink_dims set".into(),
        ));
    }
    if let Some(&bad) = params.sink_dims.iter().find(|&&d| d >= states.cols()) {
        return Err(Error::Config(format!(
            "sink dim {bad} out of range (hidden_dim={})",
            states.cols()
        )));
    }
    let mut set = SinkSet::empty(layer, Criterion::Vlm);
    for i in 0..states.rows() {
        let row = states.row(i);
        let scale = rms(row)?;
        if scale == 0.0 {
            set.zero_rms_tokens += 1;
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        let mut best_dim = params.sink_dims[0];
        for &d in &params.sink_dims {
            let value = (row[d] / scale).abs();
            if value > best {
                best = value;
                best_dim = d;
            }
        }
        if best >= params.vlm_tau {
            set.token_indices.push(i);
            set.triggers.push(best);
            set.trigger_dims.push(best_dim);
        }
    }
    Ok(set)
}

pub fn detect_sinks(
    states: &crate::numerics::Matrix,
    layer: usize,
    criterion: Criterion,
    params: &DetectionParams,
) -> Result<SinkSet> {
    match criterion {
        Criterion::Llm => Ok(detect_sinks_llm(states, layer, params)),
        Criterion::Vlm => detect_sinks_vlm(states, layer, params),
    }
}

/// Aggregated per-dimension activation statistics over a batch of runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutlierDim {
    pub dim: usize,
    pub max_activation: f64,
    /// Mean over sequences of the per-sequence layer hit fraction, percent.
    pub layer_pct: f64,
    /// Mean over sequences of the per-sequence token hit fraction, percent.
    pub token_pct: f64,
    /// Sequences in which the dimension met both fraction thresholds.
    pub qualifying_sequences: usize,
    pub is_outlier: bool,
}

/// Per-dimension statistics for every hidden dimension, sorted by maximum
/// activation (descending, ties by dimension index).
///
/// A dimension qualifies within one sequence when its magnitude exceeds the
/// threshold in more than `layer_fraction` of layers and more than
/// `token_fraction` of tokens; it is an outlier when it qualifies in at
/// least `sequence_quorum` sequences.
pub fn outlier_stats(runs: &[HiddenStates], criterion: &OutlierCriterion) -> Vec<OutlierDim> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let dim_count = first.input().cols();
    let mut max_act = vec![0.0f64; dim_count];
    let mut layer_frac_sum = vec![0.0f64; dim_count];
    let mut token_frac_sum = vec![0.0f64; dim_count];
    let mut qualifying = vec![0usize; dim_count];

    for run in runs {
        let layers = run.detection_states();
        if layers.is_empty() {
            continue;
        }
        let tokens = layers[0].rows();
        let mut layer_hits = vec![0usize; dim_count];
        // tokens x dims bitmap, flattened
        let mut token_hit = vec![false; tokens * dim_count];
        for states in layers {
            let mut layer_hit = vec![false; dim_count];
            for i in 0..states.rows() {
                let row = states.row(i);
                for (d, &v) in row.iter().enumerate() {
                    let a = v.abs();
                    if a > max_act[d] {
                        max_act[d] = a;
                    }
                    if a > criterion.magnitude_threshold {
                        layer_hit[d] = true;
                        if i < tokens {
                            token_hit[i * dim_count + d] = true;
                        }
                    }
                }
            }
            for (d, hit) in layer_hit.iter().enumerate() {
                if *hit {
                    layer_hits[d] += 1;
                }
            }
        }
        for d in 0..dim_count {
            let token_hits = (0..tokens)
                .filter(|&i| token_hit[i * dim_count + d])
                .count();
            let lf = layer_hits[d] as f64 / layers.len() as f64;
            let tf = token_hits as f64 / tokens.max(1) as f64;
            layer_frac_sum[d] += lf;
            token_frac_sum[d] += tf;
            if lf > criterion.layer_fraction && tf > criterion.token_fraction {
                qualifying[d] += 1;
            }
        }
    }

    let n_runs = runs.len() as f64;
    let mut stats: Vec<OutlierDim> = (0..dim_count)
        .map(|d| OutlierDim {
            dim: d,
            max_activation: max_act[d],
            layer_pct: 100.0 * layer_frac_sum[d] / n_runs,
            token_pct: 100.0 * token_frac_sum[d] / n_runs,
            qualifying_sequences: qualifying[d],
            is_outlier: qualifying[d] >= criterion.sequence_quorum,
        })
        .collect();
    stats.sort_by(|a, b| {
        b.max_activation
            .partial_cmp(&a.max_activation)
            .expect("finite activations")
            .then(a.dim.cmp(&b.dim))
    });
    stats
}

/// Outlier dimensions only (quorum met), sorted by max activation descending.
pub fn find_outlier_dims(runs: &[HiddenStates], criterion: &OutlierCriterion) -> Vec<OutlierDim> {
    outlier_stats(runs, criterion)
        .into_iter()
        .filter(|s| s.is_outlier)
        .collect()
}

/// Sink-dimension set for the VLM criterion, derived as the top-`k` outlier
/// dimensions that also carry the peak activation of some LLM-detected sink.
pub fn derive_sink_dims(
    stats: &[OutlierDim],
    llm_trigger_dims: &BTreeSet<usize>,
    k: usize,
) -> Vec<usize> {
    stats
        .iter()
        .filter(|s| s.is_outlier && llm_trigger_dims.contains(&s.dim))
        .take(k)
        .map(|s| s.dim)
        .collect()
}

/// Per-head sink score: the mean over query rows of the attention mass on
/// sink columns. An empty sink set scores 0 for every head.
pub fn compute_sink_score(attn: &AttentionState, sinks: &SinkSet) -> Vec<f64> {
    let heads = attn.attn.len();
    if sinks.is_empty() {
        return vec![0.0; heads];
    }
    let mut scores = Vec::with_capacity(heads);
    for a in &attn.attn {
        let n = a.rows();
        let mut total = 0.0;
        for i in 0..n {
            let row = a.row(i);
            let mut mass = 0.0;
            for &j in &sinks.token_indices {
                mass += row[j];
            }
            total += mass;
        }
        scores.push(total / n as f64);
    }
    scores
}
