// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic data with controllable sink structure plus the experiment
//! drivers: sink census, outlier-dimension analysis, Zero-K attention
//! study, head-ablation sweep, proxy correlation, and the decode latency
//! benchmark.
//!
//! Every driver is deterministic for a fixed seed except the wall-clock
//! fields of the latency benchmark. `SINKLAB_THREADS` caps the worker
//! threads used by the ablation sweep; results never depend on the thread
//! count because per-head runs are independent and collected by index.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoder::{
    DecoderConfig, ForwardRecord, HiddenStates, LayerWeights, Model, TokenLayout,
};
use crate::error::{Error, Result};
use crate::interventions::{Hooks, ZeroKParams};
use crate::numerics::{cosine, pearson, Matrix};
use crate::rng::SplitMix64;
use crate::sink_detect::{
    compute_sink_score, detect_sinks_llm, detect_sinks_vlm, outlier_stats, Criterion,
    DetectionParams, OutlierCriterion, SinkSet,
};

/// Synthetic input description: uniform base noise plus planted values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub layout: TokenLayout,
    #[serde(default = "default_base_scale")]
    pub base_scale: f64,
    /// `(token, dim, value)` entries written after the base fill.
    #[serde(default)]
    pub planted_sinks: Vec<(usize, usize, f64)>,
    /// `(dim, value, token_fraction)`: the value is written to `dim` on a
    /// seeded random subset of tokens.
    #[serde(default)]
    pub planted_outlier_dims: Vec<(usize, f64, f64)>,
    #[serde(default)]
    pub seed: u64,
}

fn default_base_scale() -> f64 {
    0.2
}

impl SyntheticSpec {
    pub fn validate(&self, hidden_dim: usize) -> Result<()> {
        let n = self.layout.len();
        if n == 0 {
            return Err(Error::Config("token layout is empty".into()));
        }
        if !(self.base_scale > 0.0 && self.base_scale.is_finite()) {
            return Err(Error::Config("base_scale must be positive".into()));
        }
        for &(token, dim, value) in &self.planted_sinks {
            if token >= n || dim >= hidden_dim || !value.is_finite() {
                return Err(Error::Config(format!(
                    "planted sink ({token}, {dim}, {value}) out of range for {n} tokens x {hidden_dim} dims"
                )));
            }
        }
        for &(dim, value, fraction) in &self.planted_outlier_dims {
            if dim >= hidden_dim || !value.is_finite() || !(0.0..=1.0).contains(&fraction) {
                return Err(Error::Config(format!(
                    "planted outlier dim ({dim}, {value}, {fraction}) invalid"
                )));
            }
        }
        Ok(())
    }
}

/// Initial hidden states for a spec: i.i.d. uniform base noise, outlier-dim
/// plants, then sink plants, all from the spec's seed.
pub fn gen_synthetic_sequence(spec: &SyntheticSpec, hidden_dim: usize) -> Result<Matrix> {
    spec.validate(hidden_dim)?;
    let n = spec.layout.len();
    let mut rng = SplitMix64::new(spec.seed);
    let mut x = Matrix::zeros(n, hidden_dim);
    for i in 0..n {
        for j in 0..hidden_dim {
            x.set(i, j, rng.uniform(-spec.base_scale, spec.base_scale));
        }
    }
    for &(dim, value, fraction) in &spec.planted_outlier_dims {
        let count = ((fraction * n as f64).round() as usize).min(n);
        for token in rng.choose(n, count) {
            x.set(token, dim, value);
        }
    }
    for &(token, dim, value) in &spec.planted_sinks {
        x.set(token, dim, value);
    }
    Ok(x)
}

/// Worker-thread cap for the sweep drivers, from `SINKLAB_THREADS`.
pub fn thread_cap() -> usize {
    std::env::var("SINKLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

// ---------------------------------------------------------------------------
// Sink census
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCensus {
    pub layer: usize,
    pub llm_count: usize,
    /// Absent when no sink dimensions are configured.
    pub vlm_count: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CensusReport {
    pub layers: Vec<LayerCensus>,
    pub total_llm: usize,
    pub total_vlm: usize,
}

/// Per-layer sink counts under both criteria, evaluated on the states
/// entering each layer of an unhooked pass.
pub fn run_sink_census(
    model: &Model,
    x0: &Matrix,
    params: &DetectionParams,
) -> Result<CensusReport> {
    let record = model.forward_all(x0, &Hooks::none())?;
    census_of_states(&record.hidden, params)
}

/// Census over already-recorded hidden states.
pub fn census_of_states(hidden: &HiddenStates, params: &DetectionParams) -> Result<CensusReport> {
    let mut layers = Vec::new();
    let mut total_llm = 0;
    let mut total_vlm = 0;
    for (layer, states) in hidden.detection_states().iter().enumerate() {
        let llm = detect_sinks_llm(states, layer, params);
        let vlm = if params.sink_dims.is_empty() {
            None
        } else {
            Some(detect_sinks_vlm(states, layer, params)?)
        };
        total_llm += llm.len();
        if let Some(v) = &vlm {
            total_vlm += v.len();
        }
        layers.push(LayerCensus {
            layer,
            llm_count: llm.len(),
            vlm_count: vlm.map(|v| v.len()),
        });
    }
    Ok(CensusReport {
        layers,
        total_llm,
        total_vlm,
    })
}

// ---------------------------------------------------------------------------
// Outlier-dimension analysis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutlierRow {
    pub dim: usize,
    pub max_activation: f64,
    pub layer_pct: f64,
    pub token_pct: f64,
    pub is_outlier: bool,
    pub is_sink_vlm: bool,
    pub is_sink_llm: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutlierReport {
    pub sequences: usize,
    pub rows: Vec<OutlierRow>,
}

/// Per-dimension statistics over many generated sequences, with flags for
/// dimensions that carried a detected sink's trigger value.
pub fn run_outlier_analysis(
    model: &Model,
    spec: &SyntheticSpec,
    sequences: usize,
    criterion: &OutlierCriterion,
    detection: &DetectionParams,
) -> Result<OutlierReport> {
    if sequences == 0 {
        return Err(Error::InvalidArgument("need at least one sequence".into()));
    }
    let d = model.config.hidden_dim;
    let mut runs: Vec<HiddenStates> = Vec::with_capacity(sequences);
    let mut llm_trigger = vec![false; d];
    let mut vlm_trigger = vec![false; d];
    for s in 0..sequences {
        let mut seq_spec = spec.clone();
        seq_spec.seed = spec.seed.wrapping_add(s as u64);
        let x0 = gen_synthetic_sequence(&seq_spec, d)?;
        let record = model.forward_all(&x0, &Hooks::none())?;
        for (layer, states) in record.hidden.detection_states().iter().enumerate() {
            let llm = detect_sinks_llm(states, layer, detection);
            for &dim in &llm.trigger_dims {
                llm_trigger[dim] = true;
            }
            if !detection.sink_dims.is_empty() {
                let vlm = detect_sinks_vlm(states, layer, detection)?;
                for &dim in &vlm.trigger_dims {
                    vlm_trigger[dim] = true;
                }
            }
        }
        runs.push(record.hidden);
    }
    let rows = outlier_stats(&runs, criterion)
        .into_iter()
        .map(|s| OutlierRow {
            dim: s.dim,
            max_activation: s.max_activation,
            layer_pct: s.layer_pct,
            token_pct: s.token_pct,
            is_outlier: s.is_outlier,
            is_sink_vlm: vlm_trigger[s.dim],
            is_sink_llm: llm_trigger[s.dim],
        })
        .collect();
    Ok(OutlierReport { sequences, rows })
}

// ---------------------------------------------------------------------------
// Zero-K study
// ---------------------------------------------------------------------------

/// Mean attention mass on sink columns for one layer (mean over heads and
/// query rows); 0 when the layer has no sinks.
fn mean_sink_attention(attn: &crate::decoder::AttentionState, sinks: &SinkSet) -> f64 {
    if sinks.is_empty() {
        return 0.0;
    }
    let scores = compute_sink_score(attn, sinks);
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroKCurvePoint {
    pub k: usize,
    pub layer: usize,
    pub baseline: f64,
    pub intervened: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffSummaryRow {
    pub k: usize,
    pub layer: usize,
    pub head: usize,
    pub mean_abs_delta_sink_cols: f64,
    pub mean_abs_delta_other_cols: f64,
}

/// Full attention maps for one intervention, retained for the diff CSV.
#[derive(Debug, Clone)]
pub struct AttentionDiff {
    pub k: usize,
    /// `(layer, head, baseline A, intervened A)`.
    pub maps: Vec<(usize, usize, Matrix, Matrix)>,
}

#[derive(Debug, Clone)]
pub struct ZeroKStudy {
    pub curves: Vec<ZeroKCurvePoint>,
    pub summaries: Vec<DiffSummaryRow>,
    /// Diff maps for the smallest non-zero `k` in the grid.
    pub diff: Option<AttentionDiff>,
}

/// Per-layer mean sink attention with and without Zero-K, for each `k` in
/// the grid (`k = 0` rows replicate the baseline). Sink columns come from
/// the baseline detection so the comparison tracks the same tokens.
pub fn run_zero_k_study(
    model: &Model,
    x0: &Matrix,
    detection: &DetectionParams,
    k_grid: &[usize],
) -> Result<ZeroKStudy> {
    let base_hooks = Hooks::detect_only(detection.clone(), Criterion::Llm);
    let baseline = model.forward_all(x0, &base_hooks)?;
    let base_sinks: Vec<&SinkSet> = baseline
        .sinks
        .iter()
        .map(|s| s.as_ref().expect("detection enabled"))
        .collect();
    let layers = model.config.num_layers;
    let base_attention: Vec<f64> = (0..layers)
        .map(|l| mean_sink_attention(&baseline.attention[l], base_sinks[l]))
        .collect();

    let mut curves = Vec::new();
    let mut summaries = Vec::new();
    let mut diff = None;
    for &k in k_grid {
        let record = if k == 0 {
            None
        } else {
            let params = ZeroKParams::new(k);
            params.validate(model.config.head_dim)?;
            let mut hooks = Hooks::detect_only(detection.clone(), Criterion::Llm);
            hooks.zero_k = Some(params);
            Some(model.forward_all(x0, &hooks)?)
        };
        for (layer, &sinks) in base_sinks.iter().enumerate() {
            let intervened = match &record {
                None => base_attention[layer],
                Some(r) => mean_sink_attention(&r.attention[layer], sinks),
            };
            curves.push(ZeroKCurvePoint {
                k,
                layer,
                baseline: base_attention[layer],
                intervened,
            });
        }
        if let Some(r) = &record {
            for (layer, &sinks) in base_sinks.iter().enumerate() {
                for head in 0..model.config.num_heads {
                    let a0 = &baseline.attention[layer].attn[head];
                    let a1 = &r.attention[layer].attn[head];
                    let n = a0.rows();
                    let mut sink_sum = 0.0;
                    let mut sink_cnt = 0usize;
                    let mut other_sum = 0.0;
                    let mut other_cnt = 0usize;
                    for i in 0..n {
                        for j in 0..n {
                            let delta = (a1.get(i, j) - a0.get(i, j)).abs();
                            if sinks.contains(j) {
                                sink_sum += delta;
                                sink_cnt += 1;
                            } else {
                                other_sum += delta;
                                other_cnt += 1;
                            }
                        }
                    }
                    summaries.push(DiffSummaryRow {
                        k,
                        layer,
                        head,
                        mean_abs_delta_sink_cols: if sink_cnt == 0 {
                            0.0
                        } else {
                            sink_sum / sink_cnt as f64
                        },
                        mean_abs_delta_other_cols: if other_cnt == 0 {
                            0.0
                        } else {
                            other_sum / other_cnt as f64
                        },
                    });
                }
            }
            if diff.is_none() {
                let maps = (0..layers)
                    .flat_map(|layer| {
                        let base = &baseline.attention[layer];
                        let cur = &r.attention[layer];
                        (0..model.config.num_heads)
                            .map(|head| {
                                (layer, head, base.attn[head].clone(), cur.attn[head].clone())
                            })
                            .collect::<Vec<_>>()
                    })
                    .collect();
                diff = Some(AttentionDiff { k, maps });
            }
        }
    }
    Ok(ZeroKStudy {
        curves,
        summaries,
        diff,
    })
}

// ---------------------------------------------------------------------------
// Head-ablation sweep
// ---------------------------------------------------------------------------

/// Linear probe: the readout vector is applied to final hidden states and
/// compared against a per-token target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeTask {
    pub readout: Vec<f64>,
    pub target: Vec<f64>,
}

impl ProbeTask {
    /// Seeded random readout with the target defined as a random linear
    /// functional of the input states.
    pub fn seeded(x0: &Matrix, seed: u64) -> Self {
        let d = x0.cols();
        let mut rng = SplitMix64::new(seed);
        let readout: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let probe: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let target = (0..x0.rows())
            .map(|i| crate::numerics::dot(x0.row(i), &probe))
            .collect();
        Self { readout, target }
    }

    /// Target fixed to whatever the given states read out to; the intact
    /// model then has zero error by construction.
    pub fn fit_to(states: &Matrix, readout: Vec<f64>) -> Self {
        let target = (0..states.rows())
            .map(|i| crate::numerics::dot(states.row(i), &readout))
            .collect();
        Self { readout, target }
    }

    pub fn mse(&self, final_states: &Matrix) -> f64 {
        let n = final_states.rows();
        let mut total = 0.0;
        for i in 0..n {
            let predicted = crate::numerics::dot(final_states.row(i), &self.readout);
            let err = predicted - self.target[i];
            total += err * err;
        }
        total / n as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub layer: usize,
    pub head: usize,
    pub sink_score: f64,
    pub delta_mse: f64,
}

/// Readout-error change from pruning each head individually, sorted by sink
/// score descending.
pub fn run_ablation_sweep(
    model: &Model,
    x0: &Matrix,
    task: &ProbeTask,
    detection: &DetectionParams,
) -> Result<Vec<AblationRow>> {
    let base_hooks = Hooks::detect_only(detection.clone(), Criterion::Llm);
    let baseline = model.forward_all(x0, &base_hooks)?;
    let base_mse = task.mse(baseline.hidden.final_state());

    let mut scores = Vec::new();
    for layer in 0..model.config.num_layers {
        let sinks = baseline.sinks[layer].as_ref().expect("detection enabled");
        let layer_scores = compute_sink_score(&baseline.attention[layer], sinks);
        for (head, &score) in layer_scores.iter().enumerate() {
            scores.push((layer, head, score));
        }
    }

    let deltas = parallel_map(&scores, |&(layer, head, _)| {
        let mut hooks = Hooks::none();
        hooks.prune.pruned_heads.insert((layer, head));
        let record = model.forward_all(x0, &hooks)?;
        Ok(task.mse(record.hidden.final_state()) - base_mse)
    })?;

    let mut rows: Vec<AblationRow> = scores
        .iter()
        .zip(deltas)
        .map(|(&(layer, head, sink_score), delta_mse)| AblationRow {
            layer,
            head,
            sink_score,
            delta_mse,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.sink_score
            .partial_cmp(&a.sink_score)
            .expect("finite scores")
            .then(a.layer.cmp(&b.layer))
            .then(a.head.cmp(&b.head))
    });
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FractionRow {
    pub fraction: f64,
    pub heads_pruned: usize,
    pub sink_ranked_mse: f64,
    pub random_mse: f64,
}

/// Prune the top fraction of heads by sink score versus a seeded random set
/// of the same size. Reported without an acceptance target: toy weights
/// carry none of the redundancy structure of trained models.
pub fn run_prune_fraction_sweep(
    model: &Model,
    x0: &Matrix,
    task: &ProbeTask,
    detection: &DetectionParams,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<FractionRow>> {
    let ranked = run_ablation_sweep(model, x0, task, detection)?;
    let total = ranked.len();
    let mut rows = Vec::new();
    for &fraction in fractions {
        let count = ((fraction * total as f64).ceil() as usize).min(total);
        let mut by_score = Hooks::none();
        for row in ranked.iter().take(count) {
            by_score.prune.pruned_heads.insert((row.layer, row.head));
        }
        let mut random = Hooks::none();
        let mut rng = SplitMix64::new(seed ^ (count as u64).wrapping_mul(0x9E37_79B9));
        let all: Vec<(usize, usize)> = ranked.iter().map(|r| (r.layer, r.head)).collect();
        let mut idx: Vec<usize> = (0..all.len()).collect();
        for i in 0..count.min(idx.len()) {
            let j = i + rng.below(idx.len() - i);
            idx.swap(i, j);
        }
        for &i in idx.iter().take(count) {
            random.prune.pruned_heads.insert(all[i]);
        }
        let score_run = model.forward_all(x0, &by_score)?;
        let random_run = model.forward_all(x0, &random)?;
        rows.push(FractionRow {
            fraction,
            heads_pruned: count,
            sink_ranked_mse: task.mse(score_run.hidden.final_state()),
            random_mse: task.mse(random_run.hidden.final_state()),
        });
    }
    Ok(rows)
}

/// Run `f` over `items` on up to `thread_cap()` scoped threads, collecting
/// results in input order.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = thread_cap().min(items.len().max(1));
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut results: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (slot_chunk, item_chunk) in results.chunks_mut(chunk).zip(items.chunks(chunk)) {
            let f = &f;
            scope.spawn(move || {
                for (slot, item) in slot_chunk.iter_mut().zip(item_chunk) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

// ---------------------------------------------------------------------------
// Proxy correlation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub layer: usize,
    pub head: usize,
    pub pearson_r: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: Vec<CorrelationRow>,
    pub mean_r: f64,
    /// Heads skipped for constant inputs or undefined cosines.
    pub skipped: usize,
}

/// Per-head Pearson correlation between attention mass on sink columns and
/// the cosine of head outputs against the sink value direction.
pub fn run_proxy_correlation(
    model: &Model,
    x0: &Matrix,
    detection: &DetectionParams,
) -> Result<CorrelationReport> {
    let hooks = Hooks::detect_only(detection.clone(), Criterion::Llm);
    let record = model.forward_all(x0, &hooks)?;
    correlation_of_record(&record, model.config.num_heads)
}

/// Correlation over an already-recorded pass (detection must have run).
pub fn correlation_of_record(
    record: &ForwardRecord,
    num_heads: usize,
) -> Result<CorrelationReport> {
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for (layer, attn) in record.attention.iter().enumerate() {
        let sinks = record.sinks[layer]
            .as_ref()
            .ok_or_else(|| Error::InvalidState("correlation requires detection".into()))?;
        if sinks.is_empty() {
            continue;
        }
        let Some(dir) = crate::interventions::sink_value_direction(&attn.values, sinks) else {
            continue;
        };
        for head in 0..num_heads {
            let a = &attn.attn[head];
            let outputs = &attn.head_outputs[head];
            let mut mass = Vec::new();
            let mut alignment = Vec::new();
            for i in 0..a.rows() {
                let x: f64 = sinks.token_indices.iter().map(|&j| a.row(i)[j]).sum();
                match cosine(outputs.row(i), &dir.dirs[head]) {
                    Ok(c) => {
                        mass.push(x);
                        alignment.push(c);
                    }
                    Err(_) => continue,
                }
            }
            match pearson(&mass, &alignment) {
                Ok(r) => rows.push(CorrelationRow {
                    layer,
                    head,
                    pearson_r: r,
                    samples: mass.len(),
                }),
                Err(_) => skipped += 1,
            }
        }
    }
    let mean_r = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.pearson_r).sum::<f64>() / rows.len() as f64
    };
    Ok(CorrelationReport {
        rows,
        mean_r,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Hooked-vs-baseline comparison (the full-method driver)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: usize,
    pub mean_abs_hidden_delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub enh_layer: Option<usize>,
    pub rotation_layers: Vec<usize>,
    pub sink_counts: Vec<usize>,
    pub hidden_deltas: Vec<LayerDelta>,
    /// Mean absolute difference between hooked and baseline decode outputs,
    /// per demo step.
    pub decode_deltas: Vec<f64>,
}

/// Run the hooked pass next to an unhooked baseline and summarize where the
/// passes diverge; also runs a few decode steps against both caches.
pub fn run_method_comparison(
    model: &Model,
    x0: &Matrix,
    hooks: &Hooks,
    decode_steps: usize,
) -> Result<MethodReport> {
    let baseline = model.forward_all(x0, &Hooks::none())?;
    let hooked = model.forward_all(x0, hooks)?;
    let sink_counts: Vec<usize> = hooked
        .sinks
        .iter()
        .map(|s| s.as_ref().map_or(0, SinkSet::len))
        .collect();
    let rotation_layers = match &hooks.rotation {
        Some(rot) => {
            let sink_layers: Vec<usize> = sink_counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(l, _)| l)
                .collect();
            rot.apply_layers(&sink_layers, model.config.num_layers)
                .into_iter()
                .collect()
        }
        None => Vec::new(),
    };
    let mut hidden_deltas = Vec::new();
    for layer in 0..model.config.num_layers {
        let a = baseline.hidden.layer_output(layer);
        let b = hooked.hidden.layer_output(layer);
        // Token pruning can shrink the hooked pass; compare the shared rows.
        let rows = a.rows().min(b.rows());
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..rows {
            for (x, y) in a.row(i).iter().zip(b.row(i)) {
                sum += (x - y).abs();
                count += 1;
            }
        }
        hidden_deltas.push(LayerDelta {
            layer,
            mean_abs_hidden_delta: if count == 0 { 0.0 } else { sum / count as f64 },
        });
    }

    let mut decode_deltas = Vec::new();
    if decode_steps > 0 {
        let (_, mut base_cache) = model.prefill(x0, &Hooks::none())?;
        let (_, mut hook_cache) = model.prefill(x0, hooks)?;
        let mut rng = SplitMix64::new((x0.rows() as u64) ^ 0xDEC0DE);
        for _ in 0..decode_steps {
            let row: Vec<f64> = (0..model.config.hidden_dim)
                .map(|_| rng.uniform(-0.2, 0.2))
                .collect();
            let a = model.decode_step(&mut base_cache, &row, &Hooks::none())?;
            let b = model.decode_step(&mut hook_cache, &row, hooks)?;
            let delta = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            decode_deltas.push(delta);
        }
    }

    Ok(MethodReport {
        enh_layer: hooks.enhancement.as_ref().map(|e| e.enh_layer),
        rotation_layers,
        sink_counts,
        hidden_deltas,
        decode_deltas,
    })
}

// ---------------------------------------------------------------------------
// Latency benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_warmup() -> usize {
    20
}
fn default_steps() -> usize {
    200
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: default_warmup(),
            steps: default_steps(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyRow {
    pub mode: String,
    pub median_sec_per_token: f64,
    /// Ratio against the first (baseline) mode.
    pub relative: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyReport {
    pub warmup: usize,
    pub steps: usize,
    pub rows: Vec<LatencyRow>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Wall-clock seconds per decode step (median over the measured steps after
/// warmup) for each named hook configuration. Single-threaded by design;
/// every mode decodes the same seeded token stream.
pub fn latency_bench(
    model: &Model,
    x0: &Matrix,
    modes: &[(String, Hooks)],
    cfg: &BenchConfig,
) -> Result<LatencyReport> {
    if modes.is_empty() {
        return Err(Error::InvalidArgument("no benchmark modes".into()));
    }
    let mut rows: Vec<LatencyRow> = Vec::with_capacity(modes.len());
    for (name, hooks) in modes {
        let (_, mut cache) = model.prefill(x0, hooks)?;
        let mut rng = SplitMix64::new(cfg.seed);
        let step_row = |rng: &mut SplitMix64| -> Vec<f64> {
            (0..model.config.hidden_dim)
                .map(|_| rng.uniform(-0.2, 0.2))
                .collect()
        };
        for _ in 0..cfg.warmup {
            let row = step_row(&mut rng);
            model.decode_step(&mut cache, &row, hooks)?;
        }
        let mut timings = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let row = step_row(&mut rng);
            let start = Instant::now();
            model.decode_step(&mut cache, &row, hooks)?;
            timings.push(start.elapsed().as_secs_f64());
        }
        let med = median(&mut timings);
        let relative = match rows.first() {
            Some(base) if base.median_sec_per_token > 0.0 => med / base.median_sec_per_token,
            _ => 1.0,
        };
        rows.push(LatencyRow {
            mode: name.clone(),
            median_sec_per_token: med,
            relative,
        });
    }
    Ok(LatencyReport {
        warmup: cfg.warmup,
        steps: cfg.steps,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Named constructions
// ---------------------------------------------------------------------------

/// Over-identification setup: a majority of tokens carry a large value on a
/// single sink dimension. The hidden width is chosen so the normalized
/// sink-dimension ratio clears the VLM threshold at every layer (the ratio
/// is capped at sqrt(D), so D must be well above tau^2), while absolute
/// magnitudes stay far below the LLM threshold.
pub fn overidentification_setup(seed: u64) -> (DecoderConfig, SyntheticSpec, DetectionParams) {
    let config = DecoderConfig {
        num_layers: 3,
        hidden_dim: 1024,
        num_heads: 4,
        head_dim: 256,
        ffn_dim: 1024,
        seed,
    };
    let spec = SyntheticSpec {
        layout: TokenLayout::new(24, 8),
        base_scale: 0.2,
        planted_sinks: vec![],
        planted_outlier_dims: vec![(7, 60.0, 0.6)],
        seed: seed.wrapping_add(1),
    };
    let detection = DetectionParams {
        sink_dims: vec![7],
        ..DetectionParams::default()
    };
    (config, spec, detection)
}

/// Residual-dominance setup: near-zero attention and FFN weights let the
/// planted massive token ride the residual stream unchanged, so the LLM
/// criterion finds exactly one sink at every layer.
pub fn residual_dominance_setup() -> (Model, Matrix, DetectionParams) {
    let d = 16;
    let config = DecoderConfig {
        num_layers: 3,
        hidden_dim: d,
        num_heads: 2,
        head_dim: 8,
        ffn_dim: d,
        seed: 0,
    };
    let mut w_v = Matrix::zeros(d, d);
    let mut w_o = Matrix::zeros(d, d);
    for i in 0..d {
        w_v.set(i, i, 0.001);
        w_o.set(i, i, 0.001);
    }
    let layer = LayerWeights {
        w_q: Matrix::zeros(d, d),
        w_k: Matrix::zeros(d, d),
        w_v,
        w_o,
        ffn_in: Matrix::zeros(d, d),
        ffn_out: Matrix::zeros(d, d),
    };
    let model = Model::from_layers(config, vec![layer.clone(), layer.clone(), layer])
        .expect("valid construction");
    let spec = SyntheticSpec {
        layout: TokenLayout::new(6, 2),
        base_scale: 0.2,
        planted_sinks: vec![(2, 4, 500.0)],
        planted_outlier_dims: vec![],
        seed: 3,
    };
    let x0 = gen_synthetic_sequence(&spec, d).expect("valid spec");
    (model, x0, DetectionParams::default())
}

/// Hand-built model where a single key dimension carries the entire
/// query-sink dot product: token 0 is a massive sink, every token emits the
/// same positive query component, and all value/output/FFN weights are zero
/// so layers pass states through unchanged.
pub fn dominant_dim_setup() -> (Model, Matrix, DetectionParams) {
    let d = 32;
    let dh = 16;
    let config = DecoderConfig {
        num_layers: 3,
        hidden_dim: d,
        num_heads: 2,
        head_dim: dh,
        ffn_dim: d,
        seed: 0,
    };
    let mut w_q = Matrix::zeros(d, d);
    let mut w_k = Matrix::zeros(d, d);
    for head in 0..2 {
        // q[i][head dim 0] = 2 * x[i][1]; k[j][head dim 0] = 0.01 * x[j][0]
        w_q.set(1, head * dh, 2.0);
        w_k.set(0, head * dh, 0.01);
    }
    let layer = LayerWeights {
        w_q,
        w_k,
        w_v: Matrix::zeros(d, d),
        w_o: Matrix::zeros(d, d),
        ffn_in: Matrix::zeros(d, d),
        ffn_out: Matrix::zeros(d, d),
    };
    let model = Model::from_layers(config, vec![layer.clone(), layer.clone(), layer])
        .expect("valid construction");

    let n = 8;
    let mut rng = SplitMix64::new(77);
    let mut x0 = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            x0.set(i, j, rng.uniform(-0.05, 0.05));
        }
        x0.set(i, 1, 1.0);
    }
    x0.set(0, 0, 500.0);
    (model, x0, DetectionParams::default())
}

/// Single-sink construction for the directional proxy. Attention mass on
/// the sink varies across positions through a query-dependent logit; head
/// outputs decompose as mass-scaled sink value, a constant perpendicular
/// component carried by a bias dimension (softmax weights sum to one, so
/// the non-sink bias contribution is exactly `(1 - mass)` scaled), and
/// value noise scaled by `noise`. The cosine against the sink direction is
/// then a smooth increasing function of the mass, degraded by the noise.
pub fn proxy_setup(noise: f64, seed: u64) -> (Model, Matrix, DetectionParams) {
    let d = 32;
    let dh = 16;
    let config = DecoderConfig {
        num_layers: 1,
        hidden_dim: d,
        num_heads: 2,
        head_dim: dh,
        ffn_dim: d,
        seed,
    };
    let mut rng = SplitMix64::new(seed);
    let mut w_q = Matrix::zeros(d, d);
    let mut w_k = Matrix::zeros(d, d);
    let mut w_v = Matrix::zeros(d, d);
    for head in 0..2 {
        w_q.set(2, head * dh, 4.0);
        w_k.set(0, head * dh, 0.01);
        // Sink value direction: input dim 0 maps onto head dim 1.
        w_v.set(0, head * dh + 1, 0.01);
        // Bias dimension: non-sink tokens carry input dim 1 = 1, mapped
        // onto head dim 2, perpendicular to the sink direction.
        w_v.set(1, head * dh + 2, 2.0);
    }
    if noise > 0.0 {
        // Rows 0 and 1 feed the structural components; only the remaining
        // value pathways get jittered.
        for i in 2..d {
            for j in 0..d {
                let jitter = rng.uniform(-noise, noise);
                w_v.set(i, j, w_v.get(i, j) + jitter);
            }
        }
    }
    let layer = LayerWeights {
        w_q,
        w_k,
        w_v,
        w_o: Matrix::zeros(d, d),
        ffn_in: Matrix::zeros(d, d),
        ffn_out: Matrix::zeros(d, d),
    };
    let model = Model::from_layers(config, vec![layer]).expect("valid construction");

    let n = 16;
    let mut x0 = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            x0.set(i, j, rng.uniform(-0.1, 0.1));
        }
        x0.set(i, 1, 1.0);
    }
    x0.set(0, 0, 500.0);
    x0.set(0, 1, 0.0);
    (model, x0, DetectionParams::default())
}

/// One-layer model where head 0 alone carries a value pathway and head 1's
/// value block is zero; the probe target is fit to the intact output so the
/// baseline error is zero and pruning head 0 must increase it.
pub fn ablation_probe_setup() -> (Model, Matrix, ProbeTask, DetectionParams) {
    let d = 16;
    let dh = 8;
    let config = DecoderConfig {
        num_layers: 1,
        hidden_dim: d,
        num_heads: 2,
        head_dim: dh,
        ffn_dim: d,
        seed: 0,
    };
    let mut w_v = Matrix::zeros(d, d);
    let mut w_o = Matrix::zeros(d, d);
    // Head 0: input dim 3 -> head dim 0 -> output dim 5.
    w_v.set(3, 0, 1.0);
    w_o.set(0, 5, 1.0);
    let mut w_k = Matrix::zeros(d, d);
    let mut w_q = Matrix::zeros(d, d);
    w_k.set(0, 0, 0.01);
    w_q.set(1, 0, 2.0);
    let layer = LayerWeights {
        w_q,
        w_k,
        w_v,
        w_o,
        ffn_in: Matrix::zeros(d, d),
        ffn_out: Matrix::zeros(d, d),
    };
    let model = Model::from_layers(config, vec![layer]).expect("valid construction");

    let n = 10;
    let mut rng = SplitMix64::new(13);
    let mut x0 = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            x0.set(i, j, rng.uniform(-0.3, 0.3));
        }
        x0.set(i, 1, 1.0);
    }
    x0.set(0, 0, 500.0);

    let mut readout = vec![0.0; d];
    readout[5] = 1.0;
    let record = model
        .forward_all(&x0, &Hooks::none())
        .expect("construction forward");
    let task = ProbeTask::fit_to(record.hidden.final_state(), readout);
    (model, x0, task, DetectionParams::default())
}
