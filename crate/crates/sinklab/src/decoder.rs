// SPDX-License-Identifier: MIT OR Apache-2.0

//! Miniature multi-head causal decoder.
//!
//! The decoder has no positional encoding (causality comes from the mask
//! alone), no normalization layers, and a two-layer tanh FFN with residual
//! that can be switched to identity for pure-attention experiments. Each
//! layer runs a fixed pipeline with hook points: sink detection on the layer
//! input, per-head Q/K/V projection, Zero-K on sink keys, masked attention,
//! head pruning, gated rotation of non-sink head outputs, mask relaxation of
//! sink rows at the enhancement layer, concatenation with output projection,
//! residual add, and the FFN. Sequence reduction via token pruning happens
//! after the enhancement layer completes.
//!
//! Weights initialize from a SplitMix64 stream seeded by the config: tensors
//! fill row-major, layer by layer in the order `W_Q, W_K, W_V, W_O, ffn_in,
//! ffn_out`, with entries uniform in `[-1/sqrt(D), 1/sqrt(D))`. The same
//! seed always yields bit-identical weights.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::{
    apply_rotation_layer, prune_heads, relax_mask_rows, rotate_row_with_mass,
    sink_query_token_prune, sink_value_direction, zero_k_keys, Hooks,
};
use crate::numerics::{dot, matmul, median_abs, row_times_cols, softmax_row, Matrix};
use crate::rng::SplitMix64;
use crate::sink_detect::{detect_sinks, Criterion, SinkSet};

/// Decoder shape and the seed its weights are drawn from.
///
/// The seed participates in initialization only and is not part of the
/// weight-file schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    #[serde(skip, default)]
    pub seed: u64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || self.head_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("decoder dimensions must be >= 1".into()));
        }
        if self.hidden_dim != self.num_heads * self.head_dim {
            return Err(Error::Config(format!(
                "hidden_dim {} != num_heads {} * head_dim {}",
                self.hidden_dim, self.num_heads, self.head_dim
            )));
        }
        Ok(())
    }
}

/// Position split of the input sequence: modality tokens occupy
/// `[0, num_modality)`, text tokens the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub num_modality: usize,
    pub num_text: usize,
}

impl TokenLayout {
    pub fn new(num_modality: usize, num_text: usize) -> Self {
        Self {
            num_modality,
            num_text,
        }
    }

    pub fn len(&self) -> usize {
        self.num_modality + self.num_text
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_modality(&self, index: usize) -> bool {
        index < self.num_modality
    }
}

/// One layer's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    #[serde(rename = "W_Q", with = "matrix_rows")]
    pub w_q: Matrix,
    #[serde(rename = "W_K", with = "matrix_rows")]
    pub w_k: Matrix,
    #[serde(rename = "W_V", with = "matrix_rows")]
    pub w_v: Matrix,
    #[serde(rename = "W_O", with = "matrix_rows")]
    pub w_o: Matrix,
    #[serde(with = "matrix_rows")]
    pub ffn_in: Matrix,
    #[serde(with = "matrix_rows")]
    pub ffn_out: Matrix,
}

/// Serialize matrices as row-major nested arrays.
mod matrix_rows {
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::numerics::Matrix;

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = (0..m.rows()).map(|i| m.row(i)).collect();
        serde::Serialize::serialize(&rows, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Matrix, D::Error> {
        let rows: Vec<Vec<f64>> = Deserialize::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(|e| D::Error::custom(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct WeightFile {
    config: DecoderConfig,
    layers: Vec<LayerWeights>,
}

/// Decoder weights plus the FFN mode. Immutable once built; shareable
/// across threads.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: DecoderConfig,
    pub layers: Vec<LayerWeights>,
    pub identity_ffn: bool,
}

/// Full attention bookkeeping for one layer of one forward pass.
///
/// `attn` always holds the causal rows; relaxed sink rows, when computed,
/// live in `relaxed` so stored attention maps are never edited in place.
/// `head_outputs` reflects every hook that ran (pruning, rotation,
/// relaxation), so `O = A V` holds only for the unhooked pass.
#[derive(Debug, Clone)]
pub struct AttentionState {
    pub head_dim: usize,
    pub queries: Vec<Matrix>,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    pub logits: Vec<Matrix>,
    pub attn: Vec<Matrix>,
    pub head_outputs: Vec<Matrix>,
    pub mask: Matrix,
    pub relaxed: Option<RelaxedRows>,
}

/// Unmasked attention rows recomputed for sink positions.
#[derive(Debug, Clone)]
pub struct RelaxedRows {
    pub positions: Vec<usize>,
    /// Per head: `positions.len() x N` attention rows.
    pub rows: Vec<Matrix>,
}

/// Per-layer activations of one pass: the input plus every layer output.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    states: Vec<Matrix>,
}

impl HiddenStates {
    pub fn new(states: Vec<Matrix>) -> Self {
        assert!(
            !states.is_empty(),
            "hidden states include at least the input"
        );
        Self { states }
    }

    pub fn input(&self) -> &Matrix {
        &self.states[0]
    }

    pub fn num_layers(&self) -> usize {
        self.states.len() - 1
    }

    /// State entering layer `layer`.
    pub fn layer_input(&self, layer: usize) -> &Matrix {
        &self.states[layer]
    }

    /// State produced by layer `layer`.
    pub fn layer_output(&self, layer: usize) -> &Matrix {
        &self.states[layer + 1]
    }

    pub fn final_state(&self) -> &Matrix {
        self.states.last().expect("nonempty")
    }

    /// The matrices sink detection sees: the input of each layer.
    pub fn detection_states(&self) -> &[Matrix] {
        &self.states[..self.states.len() - 1]
    }

    pub fn all(&self) -> &[Matrix] {
        &self.states
    }
}

/// Token positions surviving sequence reduction at one layer.
#[derive(Debug, Clone)]
pub struct RetainedTokens {
    pub layer: usize,
    pub kept: Vec<usize>,
}

/// Everything recorded by a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub hidden: HiddenStates,
    pub attention: Vec<AttentionState>,
    pub sinks: Vec<Option<SinkSet>>,
    pub retained: Option<RetainedTokens>,
}

/// Output of a single hooked layer.
#[derive(Debug, Clone)]
pub struct LayerRun {
    pub output: Matrix,
    pub attn: AttentionState,
    pub sinks: Option<SinkSet>,
    /// Set when token pruning reduced the sequence after this layer.
    pub retained: Option<Vec<usize>>,
}

/// N x N causal mask: 0 where `j <= i`, `-inf` where `j > i`.
pub fn causal_mask(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            m.set(i, j, f64::NEG_INFINITY);
        }
    }
    m
}

fn check_finite(data: &[f64], layer: usize, head: Option<usize>, what: &str) -> Result<()> {
    for &v in data {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                layer,
                head,
                detail: what.to_string(),
            });
        }
    }
    Ok(())
}

/// Logits may legitimately contain `-inf` at masked slots.
fn check_logits(data: &[f64], layer: usize, head: usize) -> Result<()> {
    for &v in data {
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::NonFinite {
                layer,
                head: Some(head),
                detail: "attention logits".into(),
            });
        }
    }
    Ok(())
}

impl Model {
    /// Deterministically initialized model; identical seeds give
    /// bit-identical weights.
    pub fn init_seeded(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = SplitMix64::new(config.seed);
        let mut tensor = |rows: usize, cols: usize| {
            let mut m = Matrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    m.set(i, j, rng.uniform(-bound, bound));
                }
            }
            m
        };
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                w_q: tensor(d, d),
                w_k: tensor(d, d),
                w_v: tensor(d, d),
                w_o: tensor(d, d),
                ffn_in: tensor(d, config.ffn_dim),
                ffn_out: tensor(config.ffn_dim, d),
            })
            .collect();
        Ok(Self {
            config,
            layers,
            identity_ffn: false,
        })
    }

    /// Model with explicitly provided layers (used by hand-built setups).
    pub fn from_layers(config: DecoderConfig, layers: Vec<LayerWeights>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.num_layers {
            return Err(Error::Config(format!(
                "expected {} layers, got {}",
                config.num_layers,
                layers.len()
            )));
        }
        Ok(Self {
            config,
            layers,
            identity_ffn: false,
        })
    }

    pub fn with_identity_ffn(mut self, identity: bool) -> Self {
        self.identity_ffn = identity;
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = WeightFile {
            config: self.config,
            layers: self.layers.clone(),
        };
        fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    /// Load a model from the JSON weight file, rejecting shape mismatches
    /// and non-finite values with an error naming the layer and tensor.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: WeightFile =
            serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
        let cfg = file.config;
        if cfg.hidden_dim != cfg.num_heads * cfg.head_dim {
            return Err(Error::Schema(format!(
                "hidden_dim {} != num_heads {} * head_dim {}",
                cfg.hidden_dim, cfg.num_heads, cfg.head_dim
            )));
        }
        if cfg.hidden_dim == 0 || cfg.num_heads == 0 || cfg.head_dim == 0 || cfg.ffn_dim == 0 {
            return Err(Error::Schema("decoder dimensions must be >= 1".into()));
        }
        if file.layers.len() != cfg.num_layers {
            return Err(Error::Schema(format!(
                "manifest declares {} layers but {} are stored",
                cfg.num_layers,
                file.layers.len()
            )));
        }
        let d = cfg.hidden_dim;
        for (idx, lw) in file.layers.iter().enumerate() {
            let tensors = [
                ("W_Q", &lw.w_q, d, d),
                ("W_K", &lw.w_k, d, d),
                ("W_V", &lw.w_v, d, d),
                ("W_O", &lw.w_o, d, d),
                ("ffn_in", &lw.ffn_in, d, cfg.ffn_dim),
                ("ffn_out", &lw.ffn_out, cfg.ffn_dim, d),
            ];
            for (name, m, rows, cols) in tensors {
                if m.rows() != rows || m.cols() != cols {
                    return Err(Error::Schema(format!(
                        "layer {idx} tensor {name}: expected {rows}x{cols}, got {}x{}",
                        m.rows(),
                        m.cols()
                    )));
                }
                if !m.is_finite() {
                    return Err(Error::Schema(format!(
                        "layer {idx} tensor {name}: non-finite value"
                    )));
                }
            }
        }
        Ok(Self {
            config: cfg,
            layers: file.layers,
            identity_ffn: false,
        })
    }

    fn project_heads(&self, x: &Matrix, w: &Matrix) -> Result<Vec<Matrix>> {
        let full = matmul(x, w)?;
        let dh = self.config.head_dim;
        Ok((0..self.config.num_heads)
            .map(|h| {
                let mut m = Matrix::zeros(x.rows(), dh);
                for i in 0..x.rows() {
                    m.row_mut(i)
                        .copy_from_slice(&full.row(i)[h * dh..(h + 1) * dh]);
                }
                m
            })
            .collect())
    }

    /// One hooked decoder layer over the full sequence.
    pub fn forward_layer(&self, x: &Matrix, layer: usize, hooks: &Hooks) -> Result<LayerRun> {
        if layer >= self.config.num_layers {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range ({} layers)",
                self.config.num_layers
            )));
        }
        if x.cols() != self.config.hidden_dim {
            return Err(Error::DimensionMismatch(format!(
                "input width {} != hidden_dim {}",
                x.cols(),
                self.config.hidden_dim
            )));
        }
        if hooks.needs_sinks() && hooks.detection.is_none() {
            return Err(Error::Config(
                "hooks require sink detection but none is configured".into(),
            ));
        }
        check_finite(x.data(), layer, None, "layer input")?;

        let lw = &self.layers[layer];
        let n = x.rows();
        let dh = self.config.head_dim;
        let num_layers = self.config.num_layers;

        // Sink detection runs on the states entering the layer.
        let sinks = match &hooks.detection {
            Some(det) => Some(detect_sinks(x, layer, det.criterion, &det.params)?),
            None => None,
        };

        let queries = self.project_heads(x, &lw.w_q)?;
        let mut keys = self.project_heads(x, &lw.w_k)?;
        let values = self.project_heads(x, &lw.w_v)?;

        if let (Some(zk), Some(s)) = (&hooks.zero_k, &sinks) {
            if !s.is_empty() {
                zero_k_keys(&mut keys, s, zk);
            }
        }

        let mask = causal_mask(n);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut logits = Vec::with_capacity(queries.len());
        let mut attn = Vec::with_capacity(queries.len());
        let mut head_outputs = Vec::with_capacity(queries.len());
        for (h, q) in queries.iter().enumerate() {
            let k = &keys[h];
            let mut l = Matrix::zeros(n, n);
            let mut a = Matrix::zeros(n, n);
            for i in 0..n {
                let q_row = q.row(i);
                let mask_row = mask.row(i);
                let l_row = l.row_mut(i);
                for j in 0..n {
                    l_row[j] = dot(q_row, k.row(j)) * scale + mask_row[j];
                }
                let probs = softmax_row(l_row)?;
                a.row_mut(i).copy_from_slice(&probs);
            }
            check_logits(l.data(), layer, h)?;
            let o = matmul(&a, &values[h])?;
            check_finite(o.data(), layer, Some(h), "head output")?;
            logits.push(l);
            attn.push(a);
            head_outputs.push(o);
        }

        let mut state = AttentionState {
            head_dim: dh,
            queries,
            keys,
            values,
            logits,
            attn,
            head_outputs,
            mask,
            relaxed: None,
        };

        prune_heads(&mut state.head_outputs, layer, &hooks.prune);

        if let (Some(rot), Some(s)) = (&hooks.rotation, &sinks) {
            if !s.is_empty() && rot.applies_to_layer(layer, num_layers) {
                if let Some(dir) = sink_value_direction(&state.values, s) {
                    apply_rotation_layer(&mut state, s, &dir, rot);
                }
            }
        }

        let relax_here = hooks
            .enhancement
            .as_ref()
            .is_some_and(|e| e.applies_to_layer(layer));
        let prune_tokens_here = hooks.token_prune.as_ref().filter(|tp| tp.layer == layer);
        let need_relaxed_rows =
            relax_here || prune_tokens_here.is_some_and(|tp| tp.use_relaxed_rows);
        if need_relaxed_rows {
            if let Some(s) = sinks.as_ref().filter(|s| !s.is_empty()) {
                let (relaxed, replacements) =
                    relax_mask_rows(&state.queries, &state.keys, &state.values, s)?;
                if relax_here {
                    for (h, rep) in replacements.iter().enumerate() {
                        for (r, &pos) in relaxed.positions.iter().enumerate() {
                            state.head_outputs[h]
                                .row_mut(pos)
                                .copy_from_slice(rep.row(r));
                        }
                    }
                }
                state.relaxed = Some(relaxed);
            }
        }

        let mut concat = Matrix::zeros(n, self.config.hidden_dim);
        for (h, o) in state.head_outputs.iter().enumerate() {
            for i in 0..n {
                concat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(o.row(i));
            }
        }
        let attn_out = matmul(&concat, &lw.w_o)?;
        check_finite(attn_out.data(), layer, None, "attention projection")?;

        let mut resid = Matrix::zeros(n, self.config.hidden_dim);
        for i in 0..n {
            let x_row = x.row(i);
            let a_row = attn_out.row(i);
            let r = resid.row_mut(i);
            for j in 0..r.len() {
                r[j] = x_row[j] + a_row[j];
            }
        }

        let mut output = if self.identity_ffn {
            resid
        } else {
            let mut mid = matmul(&resid, &lw.ffn_in)?;
            for i in 0..n {
                for v in mid.row_mut(i) {
                    *v = v.tanh();
                }
            }
            let ffn_out = matmul(&mid, &lw.ffn_out)?;
            let mut out = Matrix::zeros(n, self.config.hidden_dim);
            for i in 0..n {
                let r = resid.row(i);
                let f = ffn_out.row(i);
                let o = out.row_mut(i);
                for j in 0..o.len() {
                    o[j] = r[j] + f[j];
                }
            }
            out
        };
        check_finite(output.data(), layer, None, "layer output")?;

        let mut retained = None;
        if let (Some(tp), Some(s)) = (prune_tokens_here, &sinks) {
            let kept = sink_query_token_prune(&state, s, tp)?;
            if kept.len() < n {
                output = output.select_rows(&kept)?;
            }
            retained = Some(kept);
        }

        Ok(LayerRun {
            output,
            attn: state,
            sinks,
            retained,
        })
    }

    fn run_layers(
        &self,
        x0: &Matrix,
        hooks: &Hooks,
        record_attention: bool,
        mut cache: Option<&mut DecodeCache>,
    ) -> Result<ForwardRecord> {
        let mut states = vec![x0.clone()];
        let mut attention = Vec::new();
        let mut sinks = Vec::new();
        let mut retained = None;
        for layer in 0..self.config.num_layers {
            let x = states.last().expect("nonempty");
            let run = self.forward_layer(x, layer, hooks)?;
            if let Some(cache) = cache.as_deref_mut() {
                let median = if hooks.detection.is_some() {
                    median_abs(x.data()).unwrap_or(0.0)
                } else {
                    0.0
                };
                cache.push_prefill_layer(&run, median);
            }
            if let Some(kept) = &run.retained {
                if kept.len() < x.rows() {
                    retained = Some(RetainedTokens {
                        layer,
                        kept: kept.clone(),
                    });
                }
            }
            states.push(run.output);
            sinks.push(run.sinks);
            if record_attention {
                attention.push(run.attn);
            }
        }
        Ok(ForwardRecord {
            hidden: HiddenStates::new(states),
            attention,
            sinks,
            retained,
        })
    }

    /// Full-sequence pass recording hidden states, attention states, and
    /// per-layer sink sets.
    pub fn forward_all(&self, x0: &Matrix, hooks: &Hooks) -> Result<ForwardRecord> {
        self.run_layers(x0, hooks, true, None)
    }

    /// Full-sequence pass that also populates a decode cache (per-layer
    /// keys/values, frozen sink sets, sink value directions, and the
    /// detection medians used to re-check decoded tokens). Attention states
    /// are not retained.
    pub fn prefill(&self, x0: &Matrix, hooks: &Hooks) -> Result<(HiddenStates, DecodeCache)> {
        let mut cache = DecodeCache::empty(&self.config);
        let record = self.run_layers(x0, hooks, false, Some(&mut cache))?;
        Ok((record.hidden, cache))
    }

    /// One incremental decoding step: attends against the cached keys and
    /// values, applies the rotation hook to the new row, appends the new
    /// key/value rows, and returns the final-layer hidden state. Mask
    /// relaxation never reapplies during decoding.
    pub fn decode_step(
        &self,
        cache: &mut DecodeCache,
        input: &[f64],
        hooks: &Hooks,
    ) -> Result<Vec<f64>> {
        if cache.layers.len() != self.config.num_layers {
            return Err(Error::InvalidState(format!(
                "cache has {} layers, model has {}",
                cache.layers.len(),
                self.config.num_layers
            )));
        }
        if cache.head_dim != self.config.head_dim || cache.num_heads != self.config.num_heads {
            return Err(Error::InvalidState(
                "cache head shape does not match the model".into(),
            ));
        }
        if input.len() != self.config.hidden_dim {
            return Err(Error::InvalidState(format!(
                "decode input width {} != hidden_dim {}",
                input.len(),
                self.config.hidden_dim
            )));
        }

        let dh = self.config.head_dim;
        let heads = self.config.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let num_layers = self.config.num_layers;
        let mut x = input.to_vec();

        for layer in 0..num_layers {
            let lw = &self.layers[layer];
            let lc = &mut cache.layers[layer];
            let new_index = lc.len();

            // Re-check the incoming state against the frozen prefill
            // threshold; detected sinks join the frozen set.
            let mut is_sink = false;
            if hooks.recheck_decoded_sinks {
                if let Some(det) = &hooks.detection {
                    if det.criterion == Criterion::Llm {
                        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                        let threshold = det
                            .params
                            .llm_abs_floor
                            .max(det.params.llm_median_mult * lc.llm_median);
                        is_sink = peak > threshold;
                    }
                }
            }

            let mut q_rows = Vec::with_capacity(heads);
            let mut k_rows = Vec::with_capacity(heads);
            let mut v_rows = Vec::with_capacity(heads);
            for h in 0..heads {
                q_rows.push(row_times_cols(&x, &lw.w_q, h * dh, dh));
                k_rows.push(row_times_cols(&x, &lw.w_k, h * dh, dh));
                v_rows.push(row_times_cols(&x, &lw.w_v, h * dh, dh));
            }

            if is_sink {
                if let Some(zk) = &hooks.zero_k {
                    for k_row in &mut k_rows {
                        let mut order: Vec<usize> = (0..dh).collect();
                        order.sort_by(|&a, &b| {
                            k_row[b]
                                .abs()
                                .partial_cmp(&k_row[a].abs())
                                .expect("finite keys")
                                .then(a.cmp(&b))
                        });
                        for &d in order.iter().take(zk.top_k.min(dh)) {
                            k_row[d] = 0.0;
                        }
                    }
                }
                lc.absorb_sink(new_index, &v_rows);
            }

            for h in 0..heads {
                lc.keys[h].push_row(&k_rows[h])?;
                lc.values[h].push_row(&v_rows[h])?;
            }

            let visible = lc.len();
            let mut concat = vec![0.0; self.config.hidden_dim];
            for h in 0..heads {
                let k = &lc.keys[h];
                let v = &lc.values[h];
                let mut logits = Vec::with_capacity(visible);
                for j in 0..visible {
                    logits.push(dot(&q_rows[h], k.row(j)) * scale);
                }
                let probs = softmax_row(&logits)?;
                let mut o = vec![0.0; dh];
                for (j, &p) in probs.iter().enumerate() {
                    let v_row = v.row(j);
                    for (acc, &val) in o.iter_mut().zip(v_row) {
                        *acc += p * val;
                    }
                }
                if !is_sink {
                    if let Some(rot) = &hooks.rotation {
                        if rot.applies_to_layer(layer, num_layers) {
                            if let Some(dirs) = &lc.sink_dir {
                                let mass =
                                    || lc.sink_indices.iter().map(|&j| probs[j]).sum::<f64>();
                                o = rotate_row_with_mass(&o, &dirs[h], rot, mass);
                            }
                        }
                    }
                }
                concat[h * dh..(h + 1) * dh].copy_from_slice(&o);
            }

            let attn_out = row_times_cols(&concat, &lw.w_o, 0, self.config.hidden_dim);
            let mut resid = vec![0.0; self.config.hidden_dim];
            for j in 0..resid.len() {
                resid[j] = x[j] + attn_out[j];
            }
            x = if self.identity_ffn {
                resid
            } else {
                let mut mid = row_times_cols(&resid, &lw.ffn_in, 0, self.config.ffn_dim);
                for v in &mut mid {
                    *v = v.tanh();
                }
                let ffn = row_times_cols(&mid, &lw.ffn_out, 0, self.config.hidden_dim);
                let mut out = vec![0.0; self.config.hidden_dim];
                for j in 0..out.len() {
                    out[j] = resid[j] + ffn[j];
                }
                out
            };
        }
        Ok(x)
    }
}

/// Per-layer decode state built during prefill.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    /// Frozen sink positions in this layer's index space.
    pub sink_indices: Vec<usize>,
    /// Mean sink value direction per head, kept as a running mean.
    pub sink_dir: Option<Vec<Vec<f64>>>,
    sink_count: usize,
    /// Median absolute activation of the prefill layer input.
    pub llm_median: f64,
}

impl LayerCache {
    fn len(&self) -> usize {
        self.keys.first().map_or(0, Matrix::rows)
    }

    /// Add a newly detected sink: record its index and fold its value rows
    /// into the running mean direction.
    fn absorb_sink(&mut self, index: usize, v_rows: &[Vec<f64>]) {
        self.sink_indices.push(index);
        let new_count = self.sink_count + 1;
        match &mut self.sink_dir {
            Some(dirs) => {
                for (dir, row) in dirs.iter_mut().zip(v_rows) {
                    for (d, &v) in dir.iter_mut().zip(row) {
                        *d = (*d * self.sink_count as f64 + v) / new_count as f64;
                    }
                }
            }
            None => {
                self.sink_dir = Some(v_rows.to_vec());
            }
        }
        self.sink_count = new_count;
    }
}

/// Keys and values cached per layer from prefill, with frozen sink state.
/// Single-owner: one decode stream per cache.
#[derive(Debug, Clone)]
pub struct DecodeCache {
    pub layers: Vec<LayerCache>,
    num_heads: usize,
    head_dim: usize,
}

impl DecodeCache {
    fn empty(config: &DecoderConfig) -> Self {
        Self {
            layers: Vec::with_capacity(config.num_layers),
            num_heads: config.num_heads,
            head_dim: config.head_dim,
        }
    }

    fn push_prefill_layer(&mut self, run: &LayerRun, llm_median: f64) {
        let keys = run.attn.keys.clone();
        let values = run.attn.values.clone();
        let (sink_indices, sink_dir, sink_count) = match &run.sinks {
            Some(s) if !s.is_empty() => {
                let dir = sink_value_direction(&values, s).map(|d| d.dirs);
                (s.token_indices.clone(), dir, s.len())
            }
            _ => (Vec::new(), None, 0),
        };
        self.layers.push(LayerCache {
            keys,
            values,
            sink_indices,
            sink_dir,
            sink_count,
            llm_median,
        });
    }

    /// Cached sequence length at one layer.
    pub fn len_at(&self, layer: usize) -> usize {
        self.layers.get(layer).map_or(0, LayerCache::len)
    }
}

/// Straight-line reference attention: triple loop, no code shared with the
/// layer pipeline. Ground truth for equivalence tests.
#[allow(clippy::needless_range_loop)]
pub fn attention_naive_oracle(q: &Matrix, k: &Matrix, v: &Matrix, mask: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::DimensionMismatch(format!(
            "oracle shapes: q {}x{}, k {}x{}, v {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    if mask.rows() != q.rows() || mask.cols() != k.rows() {
        return Err(Error::DimensionMismatch(format!(
            "oracle mask: {}x{} for q {} rows, k {} rows",
            mask.rows(),
            mask.cols(),
            q.rows(),
            k.rows()
        )));
    }
    let n = q.rows();
    let m = k.rows();
    let dh = q.cols();
    let dv = v.cols();
    let mut out = Matrix::zeros(n, dv);
    for i in 0..n {
        let mut logits = vec![0.0f64; m];
        for j in 0..m {
            let mut s = 0.0;
            for d in 0..dh {
                s += q.get(i, d) * k.get(j, d);
            }
            logits[j] = s / (dh as f64).sqrt() + mask.get(i, j);
        }
        let mut max = f64::NEG_INFINITY;
        for &l in &logits {
            if l > max {
                max = l;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow);
        }
        let mut exps = vec![0.0f64; m];
        let mut sum = 0.0;
        for j in 0..m {
            exps[j] = (logits[j] - max).exp();
            sum += exps[j];
        }
        for j in 0..m {
            let a = exps[j] / sum;
            for d in 0..dv {
                out.set(i, d, out.get(i, d) + a * v.get(j, d));
            }
        }
    }
    Ok(out)
}
