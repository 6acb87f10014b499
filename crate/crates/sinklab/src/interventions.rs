// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward-pass interventions.
//!
//! All modifications attach to the decoder as hooks and run in a fixed
//! order inside each layer: sink detection on the layer input, Zero-K on
//! sink keys, attention, head pruning, gated rotation of non-sink head
//! outputs toward the mean sink value direction, and causal-mask relaxation
//! for sink rows at the enhancement layer. Degenerate inputs short-circuit
//! to bitwise identity rather than erroring, so disabled or gated-off
//! interventions leave the pass byte-for-byte unchanged.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::decoder::{AttentionState, DecoderConfig, RelaxedRows, TokenLayout};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, softmax_row, Matrix};
use crate::sink_detect::{Criterion, DetectionParams, SinkSet};

/// Serialized intervention settings (the JSON wire format).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionConfig {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_gate_temperature")]
    pub gate_temperature: f64,
    /// Enhancement layer; derived as `num_layers / 7` (at least 1) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enh_layer: Option<usize>,
    #[serde(default = "default_skip_final")]
    pub skip_final_layers: usize,
    /// Number of top-magnitude sink key dimensions to zero; 0 disables Zero-K.
    #[serde(default)]
    pub zero_k: usize,
    /// `(layer, head)` pairs whose outputs are removed.
    #[serde(default)]
    pub pruned_heads: Vec<(usize, usize)>,
    #[serde(default = "default_keep_fraction")]
    pub keep_fraction: f64,
    #[serde(default = "default_true")]
    pub rotation_enabled: bool,
    #[serde(default = "default_true")]
    pub relaxation_enabled: bool,
}

fn default_gamma() -> f64 {
    3.0
}
fn default_gate_temperature() -> f64 {
    0.1
}
fn default_skip_final() -> usize {
    2
}
fn default_keep_fraction() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            gate_temperature: default_gate_temperature(),
            enh_layer: None,
            skip_final_layers: default_skip_final(),
            zero_k: 0,
            pruned_heads: Vec::new(),
            keep_fraction: default_keep_fraction(),
            rotation_enabled: true,
            relaxation_enabled: true,
        }
    }
}

/// Default enhancement-layer placement: one seventh of the depth, at least 1
/// for models deep enough to have a layer 1.
pub fn default_enh_layer(num_layers: usize) -> usize {
    if num_layers <= 1 {
        0
    } else {
        (num_layers / 7).max(1)
    }
}

/// How the rotation gate is driven.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RotationGate {
    /// `tanh(relu(cos(o, dir)) / t)` — the default, attention-map free.
    CosineTanh,
    /// Full-strength rotation for rows whose attention mass on sink columns
    /// exceeds the threshold; requires attention rows.
    SinkScoreThreshold(f64),
}

/// Gated-rotation settings.
#[derive(Debug, Clone)]
pub struct RotationParams {
    pub gamma: f64,
    pub gate_temperature: f64,
    /// Rotation is skipped at the last `skip_final_layers` layers.
    pub skip_final_layers: usize,
    pub gate: RotationGate,
}

impl RotationParams {
    pub fn new(gamma: f64, gate_temperature: f64, skip_final_layers: usize) -> Self {
        Self {
            gamma,
            gate_temperature,
            skip_final_layers,
            gate: RotationGate::CosineTanh,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        if self.gate_temperature <= 0.0 {
            return Err(Error::Config("gate temperature must be > 0".into()));
        }
        if num_layers > 0 && self.skip_final_layers >= num_layers {
            return Err(Error::Config(format!(
                "skip_final_layers {} must be smaller than num_layers {num_layers}",
                self.skip_final_layers
            )));
        }
        Ok(())
    }

    pub fn applies_to_layer(&self, layer: usize, num_layers: usize) -> bool {
        layer + self.skip_final_layers < num_layers
    }

    /// Concrete rotation layer set: layers with detected sinks minus the
    /// final skipped ones.
    pub fn apply_layers(&self, sink_layers: &[usize], num_layers: usize) -> BTreeSet<usize> {
        sink_layers
            .iter()
            .copied()
            .filter(|&l| self.applies_to_layer(l, num_layers))
            .collect()
    }
}

/// Whether mask relaxation runs once or from the enhancement layer onward.
///
/// `FromLayerOnward` reproduces the multi-layer injection probe and is
/// experimental; the method proper relaxes once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnhancementMode {
    Once,
    FromLayerOnward,
}

/// Mask-relaxation settings.
#[derive(Debug, Clone)]
pub struct EnhancementParams {
    pub enh_layer: usize,
    pub mode: EnhancementMode,
}

impl EnhancementParams {
    pub fn once(enh_layer: usize) -> Self {
        Self {
            enh_layer,
            mode: EnhancementMode::Once,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.enh_layer >= num_layers {
            return Err(Error::Config(format!(
                "enh_layer {} out of range (num_layers={num_layers})",
                self.enh_layer
            )));
        }
        Ok(())
    }

    pub fn applies_to_layer(&self, layer: usize) -> bool {
        match self.mode {
            EnhancementMode::Once => layer == self.enh_layer,
            EnhancementMode::FromLayerOnward => layer >= self.enh_layer,
        }
    }
}

/// Zero-K settings: how many top-magnitude dimensions of each sink key to zero.
#[derive(Debug, Clone)]
pub struct ZeroKParams {
    pub top_k: usize,
}

impl ZeroKParams {
    pub fn new(top_k: usize) -> Self {
        Self { top_k }
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k > head_dim {
            return Err(Error::Config(format!(
                "zero_k must be in 1..={head_dim}, got {}",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// Head-pruning settings.
#[derive(Debug, Clone, Default)]
pub struct PruneParams {
    pub pruned_heads: BTreeSet<(usize, usize)>,
}

impl PruneParams {
    pub fn validate(&self, num_layers: usize, num_heads: usize) -> Result<()> {
        for &(l, h) in &self.pruned_heads {
            if l >= num_layers || h >= num_heads {
                return Err(Error::Config(format!(
                    "pruned head ({l}, {h}) out of range ({num_layers} layers, {num_heads} heads)"
                )));
            }
        }
        Ok(())
    }

    pub fn is_pruned(&self, layer: usize, head: usize) -> bool {
        self.pruned_heads.contains(&(layer, head))
    }
}

/// Sink-query token-pruning settings.
#[derive(Debug, Clone)]
pub struct TokenPruneParams {
    /// Fraction of modality tokens to keep, in `(0, 1]`.
    pub keep_fraction: f64,
    pub layout: TokenLayout,
    /// Score with relaxed sink rows (default) or with the causal rows,
    /// the negative control.
    pub use_relaxed_rows: bool,
    /// Layer after which the sequence is reduced (the enhancement layer).
    pub layer: usize,
}

impl TokenPruneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "keep_fraction must be in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        Ok(())
    }
}

/// Mean of the per-head value rows at sink positions.
#[derive(Debug, Clone)]
pub struct SinkDirection {
    /// One direction per head, each of head_dim length.
    pub dirs: Vec<Vec<f64>>,
    /// Number of sink positions averaged.
    pub source_count: usize,
}

/// Detection settings carried by the hook set.
#[derive(Debug, Clone)]
pub struct DetectionHook {
    pub params: DetectionParams,
    pub criterion: Criterion,
}

/// Complete hook bundle attached to a forward pass.
#[derive(Debug, Clone)]
pub struct Hooks {
    pub detection: Option<DetectionHook>,
    pub rotation: Option<RotationParams>,
    pub enhancement: Option<EnhancementParams>,
    pub zero_k: Option<ZeroKParams>,
    pub prune: PruneParams,
    pub token_prune: Option<TokenPruneParams>,
    /// Re-check newly decoded tokens against the frozen prefill threshold
    /// and fold detected sinks into the cached direction.
    pub recheck_decoded_sinks: bool,
}

impl Hooks {
    /// No interventions and no detection: the plain forward pass.
    pub fn none() -> Self {
        Self {
            detection: None,
            rotation: None,
            enhancement: None,
            zero_k: None,
            prune: PruneParams::default(),
            token_prune: None,
            recheck_decoded_sinks: false,
        }
    }

    /// Detection only: records per-layer sink sets without modifying the pass.
    pub fn detect_only(params: DetectionParams, criterion: Criterion) -> Self {
        Self {
            detection: Some(DetectionHook { params, criterion }),
            ..Self::none()
        }
    }

    /// Build validated hooks from a serialized intervention config.
    pub fn from_config(
        cfg: &InterventionConfig,
        detection: DetectionParams,
        criterion: Criterion,
        layout: Option<TokenLayout>,
        model: &DecoderConfig,
    ) -> Result<Self> {
        detection.validate()?;
        if criterion == Criterion::Vlm && detection.sink_dims.is_empty() {
            return Err(Error::Config(
                "vlm criterion requires sink_dims to be configured".into(),
            ));
        }
        let rotation = if cfg.rotation_enabled {
            let params =
                RotationParams::new(cfg.gamma, cfg.gate_temperature, cfg.skip_final_layers);
            params.validate(model.num_layers)?;
            Some(params)
        } else {
            None
        };
        let enhancement = if cfg.relaxation_enabled {
            let params = EnhancementParams::once(
                cfg.enh_layer
                    .unwrap_or_else(|| default_enh_layer(model.num_layers)),
            );
            params.validate(model.num_layers)?;
            Some(params)
        } else {
            None
        };
        let zero_k = if cfg.zero_k > 0 {
            let params = ZeroKParams::new(cfg.zero_k);
            params.validate(model.head_dim)?;
            Some(params)
        } else {
            None
        };
        let prune = PruneParams {
            pruned_heads: cfg.pruned_heads.iter().copied().collect(),
        };
        prune.validate(model.num_layers, model.num_heads)?;
        let token_prune = if cfg.keep_fraction < 1.0 {
            let layout = layout
                .ok_or_else(|| Error::Config("token pruning requires a token layout".into()))?;
            let params = TokenPruneParams {
                keep_fraction: cfg.keep_fraction,
                layout,
                use_relaxed_rows: true,
                layer: cfg
                    .enh_layer
                    .unwrap_or_else(|| default_enh_layer(model.num_layers)),
            };
            params.validate()?;
            if params.layer >= model.num_layers {
                return Err(Error::Config(format!(
                    "token-pruning layer {} out of range (num_layers={})",
                    params.layer, model.num_layers
                )));
            }
            Some(params)
        } else if !(cfg.keep_fraction > 0.0 && cfg.keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "keep_fraction must be in (0, 1], got {}",
                cfg.keep_fraction
            )));
        } else {
            None
        };
        Ok(Self {
            detection: Some(DetectionHook {
                params: detection,
                criterion,
            }),
            rotation,
            enhancement,
            zero_k,
            prune,
            token_prune,
            recheck_decoded_sinks: true,
        })
    }

    /// True when any hook needs per-layer sink sets.
    pub fn needs_sinks(&self) -> bool {
        self.rotation.is_some()
            || self.enhancement.is_some()
            || self.zero_k.is_some()
            || self.token_prune.is_some()
    }
}

/// Mean value row over sink positions, per head. `None` when the sink set
/// is empty (the caller skips rotation for the layer).
pub fn sink_value_direction(values: &[Matrix], sinks: &SinkSet) -> Option<SinkDirection> {
    if sinks.is_empty() {
        return None;
    }
    let count = sinks.len() as f64;
    let dirs = values
        .iter()
        .map(|v| {
            let mut mean = vec![0.0; v.cols()];
            for &s in &sinks.token_indices {
                let row = v.row(s);
                for (m, &x) in mean.iter_mut().zip(row) {
                    *m += x;
                }
            }
            for m in &mut mean {
                *m /= count;
            }
            mean
        })
        .collect();
    Some(SinkDirection {
        dirs,
        source_count: sinks.len(),
    })
}

/// Rotate `o` toward `dir` by adding `gamma * g` times the projection of
/// `o` onto `dir`, then rescale to the original norm. A zero gate, zero
/// gamma, or a degenerate norm returns the input bitwise.
fn rotate_with_gate(o: &[f64], dir: &[f64], gamma: f64, gate: f64) -> Vec<f64> {
    if gamma == 0.0 || gate == 0.0 {
        return o.to_vec();
    }
    let norm_o = l2_norm(o);
    if norm_o == 0.0 {
        return o.to_vec();
    }
    let norm_dir_sq = dot(dir, dir);
    if norm_dir_sq == 0.0 {
        return o.to_vec();
    }
    let coef = gamma * gate * dot(o, dir) / norm_dir_sq;
    let rotated: Vec<f64> = o.iter().zip(dir).map(|(&x, &d)| x + coef * d).collect();
    let norm_rot = l2_norm(&rotated);
    if norm_rot == 0.0 {
        return o.to_vec();
    }
    let scale = norm_o / norm_rot;
    rotated.into_iter().map(|x| x * scale).collect()
}

/// Cosine-gated rotation of one head output toward the sink value direction.
///
/// The gate is `tanh(relu(cos(o, dir)) / t)`; non-positive alignment,
/// `gamma == 0`, or a zero-norm operand short-circuits to the input bitwise.
pub fn gated_rotation(o: &[f64], dir: &[f64], params: &RotationParams) -> Vec<f64> {
    if params.gamma == 0.0 {
        return o.to_vec();
    }
    let norm_o = l2_norm(o);
    let norm_dir = l2_norm(dir);
    if norm_o == 0.0 || norm_dir == 0.0 {
        return o.to_vec();
    }
    let c = (dot(o, dir) / (norm_o * norm_dir)).clamp(-1.0, 1.0);
    if c <= 0.0 {
        return o.to_vec();
    }
    let gate = (c / params.gate_temperature).tanh();
    rotate_with_gate(o, dir, params.gamma, gate)
}

/// Rotation of one decode-time row under either gate mode. `mass` supplies
/// the row's attention mass on sink columns lazily; it is only evaluated by
/// the threshold gate.
pub fn rotate_row_with_mass(
    o: &[f64],
    dir: &[f64],
    params: &RotationParams,
    mass: impl FnOnce() -> f64,
) -> Vec<f64> {
    match params.gate {
        RotationGate::CosineTanh => gated_rotation(o, dir, params),
        RotationGate::SinkScoreThreshold(threshold) => {
            if mass() > threshold {
                rotate_with_gate(o, dir, params.gamma, 1.0)
            } else {
                o.to_vec()
            }
        }
    }
}

/// Apply gated rotation to every (head, non-sink position) of a layer.
/// Sink positions are untouched.
pub fn apply_rotation_layer(
    attn: &mut AttentionState,
    sinks: &SinkSet,
    dir: &SinkDirection,
    params: &RotationParams,
) {
    let heads = attn.head_outputs.len();
    for h in 0..heads {
        // Row attention mass on sink columns, needed only in threshold mode.
        let masses: Option<Vec<f64>> = match params.gate {
            RotationGate::CosineTanh => None,
            RotationGate::SinkScoreThreshold(_) => {
                let a = &attn.attn[h];
                Some(
                    (0..a.rows())
                        .map(|i| {
                            sinks
                                .token_indices
                                .iter()
                                .map(|&j| a.row(i)[j])
                                .sum::<f64>()
                        })
                        .collect(),
                )
            }
        };
        let out = &mut attn.head_outputs[h];
        for i in 0..out.rows() {
            if sinks.contains(i) {
                continue;
            }
            let rotated = match params.gate {
                RotationGate::CosineTanh => gated_rotation(out.row(i), &dir.dirs[h], params),
                RotationGate::SinkScoreThreshold(threshold) => {
                    let mass = masses.as_ref().expect("masses computed")[i];
                    if mass > threshold {
                        rotate_with_gate(out.row(i), &dir.dirs[h], params.gamma, 1.0)
                    } else {
                        out.row(i).to_vec()
                    }
                }
            };
            out.row_mut(i).copy_from_slice(&rotated);
        }
    }
}

/// Recompute sink-row attention without the causal mask and return both the
/// relaxed rows and the per-head replacement outputs for those rows.
///
/// This is a dedicated dense pass over the sink rows only; stored attention
/// maps are left untouched.
pub fn relax_mask_rows(
    queries: &[Matrix],
    keys: &[Matrix],
    values: &[Matrix],
    sinks: &SinkSet,
) -> Result<(RelaxedRows, Vec<Matrix>)> {
    let heads = queries.len();
    let positions = sinks.token_indices.clone();
    let mut rows = Vec::with_capacity(heads);
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = &queries[h];
        let k = &keys[h];
        let v = &values[h];
        let n = k.rows();
        let head_dim = q.cols();
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut a_rows = Matrix::zeros(positions.len(), n);
        let mut o_rows = Matrix::zeros(positions.len(), head_dim);
        for (r, &s) in positions.iter().enumerate() {
            let q_row = q.row(s);
            let mut logits = Vec::with_capacity(n);
            for j in 0..n {
                logits.push(dot(q_row, k.row(j)) * scale);
            }
            let probs = softmax_row(&logits)?;
            let out_row = o_rows.row_mut(r);
            for (j, &p) in probs.iter().enumerate() {
                let v_row = v.row(j);
                for (o, &x) in out_row.iter_mut().zip(v_row) {
                    *o += p * x;
                }
            }
            a_rows.row_mut(r).copy_from_slice(&probs);
        }
        rows.push(a_rows);
        outputs.push(o_rows);
    }
    Ok((RelaxedRows { positions, rows }, outputs))
}

/// Zero the `top_k` largest-magnitude dimensions of each sink key vector,
/// per head. Ties break toward the lower dimension index.
pub fn zero_k_keys(keys: &mut [Matrix], sinks: &SinkSet, params: &ZeroKParams) {
    for k in keys.iter_mut() {
        let head_dim = k.cols();
        let take = params.top_k.min(head_dim);
        for &s in &sinks.token_indices {
            let row = k.row_mut(s);
            let mut order: Vec<usize> = (0..head_dim).collect();
            order.sort_by(|&a, &b| {
                row[b]
                    .abs()
                    .partial_cmp(&row[a].abs())
                    .expect("finite keys")
                    .then(a.cmp(&b))
            });
            for &d in order.iter().take(take) {
                row[d] = 0.0;
            }
        }
    }
}

/// Replace the listed heads' outputs with zeros before concatenation.
pub fn prune_heads(head_outputs: &mut [Matrix], layer: usize, params: &PruneParams) {
    for (h, out) in head_outputs.iter_mut().enumerate() {
        if params.is_pruned(layer, h) {
            *out = Matrix::zeros(out.rows(), out.cols());
        }
    }
}

/// Score modality tokens by sink-query attention and return the retained
/// full-sequence index set (kept modality tokens plus all text tokens),
/// ascending.
pub fn sink_query_token_prune(
    attn: &AttentionState,
    sinks: &SinkSet,
    params: &TokenPruneParams,
) -> Result<Vec<usize>> {
    params.validate()?;
    let m = params.layout.num_modality;
    let n = params.layout.len();
    let keep = (params.keep_fraction * m as f64).ceil() as usize;
    if keep == 0 {
        return Err(Error::InvalidArgument(format!(
            "keep_fraction {} of {m} modality tokens keeps nothing",
            params.keep_fraction
        )));
    }
    if sinks.is_empty() {
        return Ok((0..n).collect());
    }

    let mut scores = vec![0.0f64; m];
    let mut samples = 0usize;
    if params.use_relaxed_rows {
        let relaxed = attn.relaxed.as_ref().ok_or_else(|| {
            Error::InvalidState(
                "token pruning requested relaxed rows that were not computed".into(),
            )
        })?;
        for rows in &relaxed.rows {
            for r in 0..rows.rows() {
                let row = rows.row(r);
                for j in 0..m {
                    scores[j] += row[j];
                }
                samples += 1;
            }
        }
    } else {
        for a in &attn.attn {
            for &s in &sinks.token_indices {
                let row = a.row(s);
                for j in 0..m {
                    scores[j] += row[j];
                }
                samples += 1;
            }
        }
    }
    if samples > 0 {
        for s in &mut scores {
            *s /= samples as f64;
        }
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(keep.min(m)).collect();
    kept.sort_unstable();
    kept.extend(m..n);
    Ok(kept)
}
