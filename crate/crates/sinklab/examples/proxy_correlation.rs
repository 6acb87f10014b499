// SPDX-License-Identifier: MIT OR Apache-2.0

//! Directional proxy: attention mass on sink columns correlates with the
//! cosine between head outputs and the sink value direction, which is what
//! lets the rotation gate run without touching attention maps.
//!
//! ```bash
//! cargo run --example proxy_correlation
//! ```

use sinklab::harness::{gen_synthetic_sequence, proxy_setup, run_proxy_correlation, SyntheticSpec};
use sinklab::{DecoderConfig, DetectionParams, Model, TokenLayout};

fn main() -> sinklab::Result<()> {
    println!("single-sink construction (value noise 0.5):");
    let (model, x0, detection) = proxy_setup(0.5, 8);
    let report = run_proxy_correlation(&model, &x0, &detection)?;
    for row in &report.rows {
        println!(
            "  layer {} head {}: r = {:.4} over {} positions",
            row.layer, row.head, row.pearson_r, row.samples
        );
    }
    println!(
        "  mean r = {:.4}, skipped heads = {}",
        report.mean_r, report.skipped
    );

    println!("\nseeded random weights with a planted sink:");
    let config = DecoderConfig {
        num_layers: 4,
        hidden_dim: 512,
        num_heads: 4,
        head_dim: 128,
        ffn_dim: 512,
        seed: 5,
    };
    let model = Model::init_seeded(config)?;
    let spec = SyntheticSpec {
        layout: TokenLayout::new(24, 8),
        base_scale: 0.2,
        planted_sinks: vec![(0, 7, 500.0)],
        planted_outlier_dims: vec![],
        seed: 6,
    };
    let x0 = gen_synthetic_sequence(&spec, config.hidden_dim)?;
    let report = run_proxy_correlation(&model, &x0, &DetectionParams::default())?;
    for row in &report.rows {
        println!(
            "  layer {} head {}: r = {:.4} over {} positions",
            row.layer, row.head, row.pearson_r, row.samples
        );
    }
    println!(
        "  mean r = {:.4}, skipped heads = {}",
        report.mean_r, report.skipped
    );
    Ok(())
}
