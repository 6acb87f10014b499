// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decode-step latency: baseline vs gated rotation vs rotation plus
//! sink-query token pruning.
//!
//! Rotation adds a handful of head-dim dot products per step; pruning
//! shortens the cached sequence for every layer past the enhancement
//! layer, so it decodes faster than the baseline.
//!
//! ```bash
//! cargo run --release --example latency_bench
//! ```

use sinklab::harness::{gen_synthetic_sequence, latency_bench, BenchConfig, SyntheticSpec};
use sinklab::interventions::InterventionConfig;
use sinklab::sink_detect::Criterion;
use sinklab::{DecoderConfig, DetectionParams, Hooks, Model, TokenLayout};

fn main() -> sinklab::Result<()> {
    let config = DecoderConfig {
        num_layers: 8,
        hidden_dim: 256,
        num_heads: 8,
        head_dim: 32,
        ffn_dim: 256,
        seed: 2,
    };
    let model = Model::init_seeded(config)?;
    let layout = TokenLayout::new(448, 64);
    let spec = SyntheticSpec {
        layout,
        base_scale: 0.2,
        planted_sinks: vec![(0, 5, 500.0)],
        planted_outlier_dims: vec![],
        seed: 3,
    };
    let x0 = gen_synthetic_sequence(&spec, config.hidden_dim)?;
    let detection = DetectionParams::default();

    let outro = InterventionConfig {
        enh_layer: Some(1),
        ..InterventionConfig::default()
    };
    let pruned = InterventionConfig {
        keep_fraction: 0.4,
        ..outro.clone()
    };
    let modes = vec![
        ("baseline".to_string(), Hooks::none()),
        (
            "rotate+relax".to_string(),
            Hooks::from_config(
                &outro,
                detection.clone(),
                Criterion::Llm,
                Some(layout),
                &config,
            )?,
        ),
        (
            "rotate+relax+prune40".to_string(),
            Hooks::from_config(&pruned, detection, Criterion::Llm, Some(layout), &config)?,
        ),
    ];

    let bench = BenchConfig {
        warmup: 20,
        steps: 100,
        seed: 3,
    };
    println!(
        "sequence {} tokens, {} layers, {} heads; {} warmup + {} measured steps",
        layout.len(),
        config.num_layers,
        config.num_heads,
        bench.warmup,
        bench.steps
    );
    let report = latency_bench(&model, &x0, &modes, &bench)?;
    println!("{:<24}{:>18}{:>10}", "mode", "sec/token (med)", "rel");
    for row in &report.rows {
        println!(
            "{:<24}{:>18.6}{:>10.3}",
            row.mode, row.median_sec_per_token, row.relative
        );
    }
    Ok(())
}
