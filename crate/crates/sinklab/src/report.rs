// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment report assembly and CSV serialization.
//!
//! Every experiment writes a `report.json` plus per-table CSV files. Float
//! fields use Rust's shortest round-trip formatting, so reports from equal
//! runs are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::error::Result;
use crate::harness::{
    AblationRow, AttentionDiff, CensusReport, CorrelationReport, DiffSummaryRow, FractionRow,
    LatencyReport, MethodReport, OutlierRow, SyntheticSpec, ZeroKCurvePoint,
};
use crate::interventions::InterventionConfig;
use crate::sink_detect::{DetectionParams, SinkScoreEntry};

/// Structured record of one experiment run. Fields irrelevant to the
/// experiment stay empty and are skipped during serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub tool_version: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    pub model: DecoderConfig,
    pub detection: DetectionParams,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intervention: Option<InterventionConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub census: Option<CensusReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub sink_scores: Vec<SinkScoreEntry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub correlation: Option<CorrelationReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub ablation: Vec<AblationRow>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub prune_fractions: Vec<FractionRow>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub zero_k_curves: Vec<ZeroKCurvePoint>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub attention_diff_summary: Vec<DiffSummaryRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub method: Option<MethodReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timings: Option<LatencyReport>,
}

impl ExperimentReport {
    pub fn new(experiment: &str, model: DecoderConfig, detection: DetectionParams) -> Self {
        Self {
            experiment: experiment.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            model,
            detection,
            synthetic: None,
            intervention: None,
            census: None,
            sink_scores: Vec::new(),
            correlation: None,
            ablation: Vec::new(),
            prune_fractions: Vec::new(),
            zero_k_curves: Vec::new(),
            attention_diff_summary: Vec::new(),
            method: None,
            timings: None,
        }
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_census_csv(path: &Path, report: &CensusReport) -> Result<()> {
    write_csv(
        path,
        "layer,llm_count,vlm_count",
        report.layers.iter().map(|l| {
            let vlm = l.vlm_count.map(|v| v.to_string()).unwrap_or_default();
            format!("{},{},{}", l.layer, l.llm_count, vlm)
        }),
    )
}

pub fn write_outliers_csv(path: &Path, rows: &[OutlierRow]) -> Result<()> {
    write_csv(
        path,
        "dim,max_activation,layer_pct,token_pct,is_outlier,is_sink_vlm,is_sink_llm",
        rows.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{}",
                r.dim,
                r.max_activation,
                r.layer_pct,
                r.token_pct,
                r.is_outlier,
                r.is_sink_vlm,
                r.is_sink_llm
            )
        }),
    )
}

pub fn write_sink_scores_csv(path: &Path, entries: &[SinkScoreEntry]) -> Result<()> {
    write_csv(
        path,
        "layer,head,score",
        entries
            .iter()
            .map(|e| format!("{},{},{}", e.layer, e.head, e.score)),
    )
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_csv(
        path,
        "layer,head,sink_score,delta_mse",
        rows.iter()
            .map(|r| format!("{},{},{},{}", r.layer, r.head, r.sink_score, r.delta_mse)),
    )
}

pub fn write_correlation_csv(path: &Path, report: &CorrelationReport) -> Result<()> {
    write_csv(
        path,
        "layer,head,pearson_r,samples",
        report
            .rows
            .iter()
            .map(|r| format!("{},{},{},{}", r.layer, r.head, r.pearson_r, r.samples)),
    )
}

pub fn write_latency_csv(path: &Path, report: &LatencyReport) -> Result<()> {
    write_csv(
        path,
        "mode,median_sec_per_token,relative",
        report
            .rows
            .iter()
            .map(|r| format!("{},{},{}", r.mode, r.median_sec_per_token, r.relative)),
    )
}

pub fn write_zero_k_curves_csv(path: &Path, curves: &[ZeroKCurvePoint]) -> Result<()> {
    write_csv(
        path,
        "k,layer,baseline,intervened",
        curves
            .iter()
            .map(|c| format!("{},{},{},{}", c.k, c.layer, c.baseline, c.intervened)),
    )
}

/// Full baseline/intervened attention maps with per-cell deltas.
pub fn write_attention_diff_csv(path: &Path, diff: &AttentionDiff) -> Result<()> {
    let mut out = String::from("layer,head,row,col,baseline,intervened,delta\n");
    for (layer, head, base, intervened) in &diff.maps {
        for i in 0..base.rows() {
            for j in 0..base.cols() {
                let b = base.get(i, j);
                let v = intervened.get(i, j);
                let _ = writeln!(out, "{layer},{head},{i},{j},{b},{v},{}", v - b);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_hidden_deltas_csv(path: &Path, method: &MethodReport) -> Result<()> {
    write_csv(
        path,
        "layer,mean_abs_hidden_delta",
        method
            .hidden_deltas
            .iter()
            .map(|d| format!("{},{}", d.layer, d.mean_abs_hidden_delta)),
    )
}
