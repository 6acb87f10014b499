// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end: config loading, flag overrides, experiment
//! dispatch, and run manifests.
//!
//! Precedence is flags > config file > built-in defaults. Every run writes
//! a `manifest.json` next to its outputs recording the command, the config
//! and weight sources, and the seed, so a run can be reproduced by
//! re-invoking the same command with the recorded parameters; everything
//! except timing fields and the manifest timestamp is byte-identical across
//! repeats.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, Model};
use crate::error::{Error, Result};
use crate::harness::{
    gen_synthetic_sequence, latency_bench, run_ablation_sweep, run_method_comparison,
    run_outlier_analysis, run_proxy_correlation, run_prune_fraction_sweep, run_sink_census,
    run_zero_k_study, BenchConfig, ProbeTask, SyntheticSpec,
};
use crate::interventions::{default_enh_layer, Hooks, InterventionConfig};
use crate::report::{self, ExperimentReport};
use crate::sink_detect::{Criterion, DetectionParams, OutlierCriterion, SinkScoreEntry};

/// Decoder shape as written in config files (the init seed comes from the
/// command line, never the file).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    #[serde(default)]
    pub identity_ffn: bool,
}

impl ModelSection {
    fn to_config(&self, seed: u64) -> DecoderConfig {
        DecoderConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            ffn_dim: self.ffn_dim,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutlierSection {
    #[serde(default = "default_sequences")]
    pub sequences: usize,
    #[serde(flatten)]
    pub criterion: OutlierCriterion,
}

fn default_sequences() -> usize {
    100
}

impl Default for OutlierSection {
    fn default() -> Self {
        Self {
            sequences: default_sequences(),
            criterion: OutlierCriterion::default(),
        }
    }
}

fn default_zero_k_grid() -> Vec<usize> {
    vec![0, 1, 5, 10]
}

fn default_prune_fractions() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5]
}

/// Root configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolConfig {
    pub model: ModelSection,
    pub synthetic: SyntheticSpec,
    #[serde(default)]
    pub detection: DetectionParams,
    #[serde(default)]
    pub intervention: InterventionConfig,
    #[serde(default)]
    pub outliers: OutlierSection,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default = "default_zero_k_grid")]
    pub zero_k_grid: Vec<usize>,
    #[serde(default = "default_prune_fractions")]
    pub prune_fractions: Vec<f64>,
}

impl ToolConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("cannot parse config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CriterionArg {
    Llm,
    Vlm,
}

impl From<CriterionArg> for Criterion {
    fn from(value: CriterionArg) -> Self {
        match value {
            CriterionArg::Llm => Criterion::Llm,
            CriterionArg::Vlm => Criterion::Vlm,
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Load model weights from a file (mutually exclusive with --seed).
    #[arg(long, conflicts_with = "seed")]
    pub weights: Option<PathBuf>,
    /// Initialize model weights from this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Rotation strength.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Rotation gate temperature.
    #[arg(long = "gate-temp")]
    pub gate_temp: Option<f64>,
    /// Enhancement (mask relaxation) layer.
    #[arg(long = "enh-layer")]
    pub enh_layer: Option<usize>,
    /// Number of final layers excluded from rotation.
    #[arg(long = "skip-final")]
    pub skip_final: Option<usize>,
    /// Zero the top-k sink key dimensions (0 disables).
    #[arg(long = "zero-k")]
    pub zero_k: Option<usize>,
    /// Fraction of modality tokens kept by sink-query token pruning.
    #[arg(long = "keep-fraction")]
    pub keep_fraction: Option<f64>,
    /// Sink criterion driving detection-dependent hooks.
    #[arg(long, value_enum)]
    pub criterion: Option<CriterionArg>,
    /// Comma-separated sink dimension indices for the VLM criterion.
    #[arg(long = "sink-dims", value_delimiter = ',')]
    pub sink_dims: Option<Vec<usize>>,
    #[arg(long = "disable-rotation")]
    pub disable_rotation: bool,
    #[arg(long = "disable-relaxation")]
    pub disable_relaxation: bool,
}

#[derive(Debug, Parser)]
#[command(
    name = "sinklab",
    version,
    about = "Attention-sink experiments on a miniature causal decoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer sink counts under both criteria plus outlier-dimension stats.
    Census(CommonArgs),
    /// Full gated-rotation + mask-relaxation run compared against a baseline.
    Outro(CommonArgs),
    /// Decode latency benchmark (baseline, hooked, hooked + token pruning).
    Bench(CommonArgs),
    /// Per-head ablation sweep against the linear probe task.
    Ablate(CommonArgs),
    /// Zero-K sink-attention study with attention diff maps.
    Zerok(CommonArgs),
    /// Sink-mass vs head-output-alignment correlation per head.
    Correlate(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Census(_) => "census",
            Command::Outro(_) => "outro",
            Command::Bench(_) => "bench",
            Command::Ablate(_) => "ablate",
            Command::Zerok(_) => "zerok",
            Command::Correlate(_) => "correlate",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Census(a)
            | Command::Outro(a)
            | Command::Bench(a)
            | Command::Ablate(a)
            | Command::Zerok(a)
            | Command::Correlate(a) => a,
        }
    }
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub weights_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    pub out_dir: String,
    pub timestamp_unix: u64,
    pub tool_version: String,
}

/// Everything a run needs after config + flags are reconciled.
struct RunContext {
    config: ToolConfig,
    model: Model,
    x0: crate::numerics::Matrix,
    criterion: Criterion,
    seed: Option<u64>,
    out: PathBuf,
}

impl RunContext {
    fn report(&self, experiment: &str) -> ExperimentReport {
        let mut report =
            ExperimentReport::new(experiment, self.model.config, self.config.detection.clone());
        report.seed = self.seed;
        report.synthetic = Some(self.config.synthetic.clone());
        report
    }

    fn hooks(&self) -> Result<Hooks> {
        Hooks::from_config(
            &self.config.intervention,
            self.config.detection.clone(),
            self.criterion,
            Some(self.config.synthetic.layout),
            &self.model.config,
        )
    }

    fn write_manifest(&self, command: &str, args: &CommonArgs) -> Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            config_path: args.config.display().to_string(),
            weights_path: args.weights.as_ref().map(|p| p.display().to_string()),
            seed: self.seed,
            out_dir: self.out.display().to_string(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        report::write_json(&self.out.join("manifest.json"), &manifest)
    }
}

fn apply_overrides(config: &mut ToolConfig, args: &CommonArgs) {
    if let Some(gamma) = args.gamma {
        config.intervention.gamma = gamma;
    }
    if let Some(temp) = args.gate_temp {
        config.intervention.gate_temperature = temp;
    }
    if let Some(layer) = args.enh_layer {
        config.intervention.enh_layer = Some(layer);
    }
    if let Some(skip) = args.skip_final {
        config.intervention.skip_final_layers = skip;
    }
    if let Some(k) = args.zero_k {
        config.intervention.zero_k = k;
    }
    if let Some(fraction) = args.keep_fraction {
        config.intervention.keep_fraction = fraction;
    }
    if let Some(dims) = &args.sink_dims {
        config.detection.sink_dims = dims.clone();
    }
    if args.disable_rotation {
        config.intervention.rotation_enabled = false;
    }
    if args.disable_relaxation {
        config.intervention.relaxation_enabled = false;
    }
}

fn build_context(args: &CommonArgs) -> Result<RunContext> {
    let mut config = ToolConfig::load(&args.config)?;
    apply_overrides(&mut config, args);
    config.detection.validate()?;

    let criterion: Criterion = args.criterion.map(Into::into).unwrap_or(Criterion::Llm);
    if criterion == Criterion::Vlm && config.detection.sink_dims.is_empty() {
        return Err(Error::Config(
            "--criterion vlm requires sink dimensions (config detection.sink_dims or --sink-dims)"
                .into(),
        ));
    }

    let model = match (&args.weights, args.seed) {
        (Some(path), None) => {
            let mut m = Model::load(path)?;
            m.identity_ffn = config.model.identity_ffn;
            m
        }
        (None, Some(seed)) => {
            let mut m = Model::init_seeded(config.model.to_config(seed))?;
            m.identity_ffn = config.model.identity_ffn;
            m
        }
        (None, None) => {
            return Err(Error::Config(
                "exactly one of --weights or --seed is required".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };

    let mut synthetic = config.synthetic.clone();
    if let Some(seed) = args.seed {
        synthetic.seed = seed.wrapping_add(1);
    }
    config.synthetic = synthetic;
    let x0 = gen_synthetic_sequence(&config.synthetic, model.config.hidden_dim)?;

    fs::create_dir_all(&args.out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", args.out.display())))?;

    Ok(RunContext {
        config,
        model,
        x0,
        criterion,
        seed: args.seed,
        out: args.out.clone(),
    })
}

/// Parse-and-run entry point used by the binary.
pub fn run(cli: Cli) -> Result<()> {
    let args = cli.command.args().clone();
    let ctx = build_context(&args)?;
    match &cli.command {
        Command::Census(_) => cmd_census(&ctx)?,
        Command::Outro(_) => cmd_outro(&ctx)?,
        Command::Bench(_) => cmd_bench(&ctx)?,
        Command::Ablate(_) => cmd_ablate(&ctx)?,
        Command::Zerok(_) => cmd_zerok(&ctx)?,
        Command::Correlate(_) => cmd_correlate(&ctx)?,
    }
    ctx.write_manifest(cli.command.name(), &args)?;
    Ok(())
}

fn cmd_census(ctx: &RunContext) -> Result<()> {
    let census = run_sink_census(&ctx.model, &ctx.x0, &ctx.config.detection)?;
    for layer in &census.layers {
        match layer.vlm_count {
            Some(vlm) => println!(
                "census layer {}: llm={} vlm={}",
                layer.layer, layer.llm_count, vlm
            ),
            None => println!("census layer {}: llm={}", layer.layer, layer.llm_count),
        }
    }
    let outliers = run_outlier_analysis(
        &ctx.model,
        &ctx.config.synthetic,
        ctx.config.outliers.sequences,
        &ctx.config.outliers.criterion,
        &ctx.config.detection,
    )?;
    let outlier_count = outliers.rows.iter().filter(|r| r.is_outlier).count();
    println!(
        "outliers: {outlier_count} of {} dims over {} sequences",
        outliers.rows.len(),
        outliers.sequences
    );
    report::write_census_csv(&ctx.out.join("census.csv"), &census)?;
    report::write_outliers_csv(&ctx.out.join("outliers.csv"), &outliers.rows)?;
    let mut rep = ctx.report("census");
    rep.census = Some(census);
    report::write_json(&ctx.out.join("report.json"), &rep)
}

fn cmd_outro(ctx: &RunContext) -> Result<()> {
    let hooks = ctx.hooks()?;
    match ctx.config.intervention.enh_layer {
        Some(layer) => println!("enh_layer: {layer}"),
        None => println!(
            "enh_layer: {} (default num_layers/7)",
            default_enh_layer(ctx.model.config.num_layers)
        ),
    }
    let method = run_method_comparison(&ctx.model, &ctx.x0, &hooks, 8)?;
    println!(
        "sink counts per layer: {:?}; rotation layers: {:?}",
        method.sink_counts, method.rotation_layers
    );
    report::write_hidden_deltas_csv(&ctx.out.join("hidden_deltas.csv"), &method)?;
    let mut rep = ctx.report("outro");
    rep.intervention = Some(ctx.config.intervention.clone());
    rep.method = Some(method);
    report::write_json(&ctx.out.join("report.json"), &rep)
}

fn cmd_bench(ctx: &RunContext) -> Result<()> {
    let mut full = ctx.config.intervention.clone();
    let prune_fraction = if full.keep_fraction < 1.0 {
        full.keep_fraction
    } else {
        0.4
    };
    full.keep_fraction = 1.0;
    let hooks_outro = Hooks::from_config(
        &full,
        ctx.config.detection.clone(),
        ctx.criterion,
        Some(ctx.config.synthetic.layout),
        &ctx.model.config,
    )?;
    let mut pruned = full.clone();
    pruned.keep_fraction = prune_fraction;
    let hooks_pruned = Hooks::from_config(
        &pruned,
        ctx.config.detection.clone(),
        ctx.criterion,
        Some(ctx.config.synthetic.layout),
        &ctx.model.config,
    )?;
    let modes = vec![
        ("baseline".to_string(), Hooks::none()),
        ("outro".to_string(), hooks_outro),
        (format!("outro_prune_{prune_fraction}"), hooks_pruned),
    ];
    let latency = latency_bench(&ctx.model, &ctx.x0, &modes, &ctx.config.bench)?;
    for row in &latency.rows {
        println!(
            "bench {}: {:.6} s/token (rel {:.3})",
            row.mode, row.median_sec_per_token, row.relative
        );
    }
    report::write_latency_csv(&ctx.out.join("latency.csv"), &latency)?;
    let mut rep = ctx.report("bench");
    rep.intervention = Some(ctx.config.intervention.clone());
    rep.timings = Some(latency);
    report::write_json(&ctx.out.join("report.json"), &rep)
}

fn cmd_ablate(ctx: &RunContext) -> Result<()> {
    let task_seed = ctx.config.synthetic.seed.wrapping_add(0x7A5C);
    let task = ProbeTask::seeded(&ctx.x0, task_seed);
    let rows = run_ablation_sweep(&ctx.model, &ctx.x0, &task, &ctx.config.detection)?;
    let fractions = run_prune_fraction_sweep(
        &ctx.model,
        &ctx.x0,
        &task,
        &ctx.config.detection,
        &ctx.config.prune_fractions,
        task_seed,
    )?;
    println!("ablation: {} heads swept", rows.len());
    let scores: Vec<SinkScoreEntry> = rows
        .iter()
        .map(|r| SinkScoreEntry {
            layer: r.layer,
            head: r.head,
            score: r.sink_score,
        })
        .collect();
    report::write_ablation_csv(&ctx.out.join("ablation.csv"), &rows)?;
    report::write_sink_scores_csv(&ctx.out.join("sink_scores.csv"), &scores)?;
    let mut rep = ctx.report("ablate");
    rep.ablation = rows;
    rep.sink_scores = scores;
    rep.prune_fractions = fractions;
    report::write_json(&ctx.out.join("report.json"), &rep)
}

fn cmd_zerok(ctx: &RunContext) -> Result<()> {
    let mut grid = ctx.config.zero_k_grid.clone();
    if ctx.config.intervention.zero_k > 0 && !grid.contains(&ctx.config.intervention.zero_k) {
        grid.push(ctx.config.intervention.zero_k);
        grid.sort_unstable();
    }
    let study = run_zero_k_study(&ctx.model, &ctx.x0, &ctx.config.detection, &grid)?;
    for point in study.curves.iter().filter(|c| c.layer == 0) {
        println!(
            "zerok k={}: layer0 sink attention {:.4} -> {:.4}",
            point.k, point.baseline, point.intervened
        );
    }
    report::write_zero_k_curves_csv(&ctx.out.join("zerok_curves.csv"), &study.curves)?;
    if let Some(diff) = &study.diff {
        report::write_attention_diff_csv(&ctx.out.join("attention_diff.csv"), diff)?;
    }
    let mut rep = ctx.report("zerok");
    rep.zero_k_curves = study.curves;
    rep.attention_diff_summary = study.summaries;
    report::write_json(&ctx.out.join("report.json"), &rep)
}

fn cmd_correlate(ctx: &RunContext) -> Result<()> {
    let correlation = run_proxy_correlation(&ctx.model, &ctx.x0, &ctx.config.detection)?;
    println!(
        "correlation: mean r = {:.4} over {} heads ({} skipped)",
        correlation.mean_r,
        correlation.rows.len(),
        correlation.skipped
    );
    report::write_correlation_csv(&ctx.out.join("correlation.csv"), &correlation)?;
    let mut rep = ctx.report("correlate");
    rep.correlation = Some(correlation);
    report::write_json(&ctx.out.join("report.json"), &rep)
}

/// Exit code for an error, per the documented contract: 2 for usage or
/// configuration problems, 3 for weight-file schema problems, 4 for numeric
/// failures.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Schema(_) => 3,
        Error::NonFinite { .. }
        | Error::DegenerateRow
        | Error::ZeroDirection
        | Error::UndefinedCorrelation(_) => 4,
        _ => 2,
    }
}
