// SPDX-License-Identifier: MIT OR Apache-2.0

//! The full inference-time method end to end: detect sinks per layer,
//! rotate non-sink head outputs toward the mean sink value direction under
//! the tanh gate, relax the causal mask for sink rows at the enhancement
//! layer during prefill, then keep rotating through incremental decode
//! steps with the sink state frozen in the cache.
//!
//! ```bash
//! cargo run --example outro_decode
//! ```

use sinklab::harness::{gen_synthetic_sequence, run_method_comparison, SyntheticSpec};
use sinklab::interventions::InterventionConfig;
use sinklab::sink_detect::Criterion;
use sinklab::{DecoderConfig, DetectionParams, Hooks, Model, TokenLayout};

fn main() -> sinklab::Result<()> {
    let config = DecoderConfig {
        num_layers: 4,
        hidden_dim: 512,
        num_heads: 4,
        head_dim: 128,
        ffn_dim: 512,
        seed: 5,
    };
    let model = Model::init_seeded(config)?;
    let layout = TokenLayout::new(24, 8);
    let spec = SyntheticSpec {
        layout,
        base_scale: 0.2,
        planted_sinks: vec![(0, 7, 500.0)],
        planted_outlier_dims: vec![],
        seed: 6,
    };
    let x0 = gen_synthetic_sequence(&spec, config.hidden_dim)?;

    let intervention = InterventionConfig {
        gamma: 3.0,
        skip_final_layers: 2,
        ..InterventionConfig::default()
    };
    let hooks = Hooks::from_config(
        &intervention,
        DetectionParams::default(),
        Criterion::Llm,
        Some(layout),
        &config,
    )?;

    let report = run_method_comparison(&model, &x0, &hooks, 6)?;
    println!("enhancement layer: {:?}", report.enh_layer);
    println!("sink counts per layer: {:?}", report.sink_counts);
    println!("rotation applied at layers: {:?}", report.rotation_layers);
    println!("\nmean |hidden delta| vs baseline:");
    for delta in &report.hidden_deltas {
        println!(
            "  layer {}: {:.6}",
            delta.layer, delta.mean_abs_hidden_delta
        );
    }
    println!("\nmean |output delta| per decode step:");
    for (step, delta) in report.decode_deltas.iter().enumerate() {
        println!("  step {step}: {delta:.6}");
    }
    println!("\ngamma = 0 short-circuits bitwise:");
    let zero_gamma = InterventionConfig {
        gamma: 0.0,
        relaxation_enabled: false,
        ..intervention
    };
    let hooks_zero = Hooks::from_config(
        &zero_gamma,
        DetectionParams::default(),
        Criterion::Llm,
        Some(layout),
        &config,
    )?;
    let plain = model.forward_all(&x0, &Hooks::none())?;
    let gated = model.forward_all(&x0, &hooks_zero)?;
    let identical = plain
        .hidden
        .final_state()
        .data()
        .iter()
        .zip(gated.hidden.final_state().data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("  final states identical: {identical}");
    Ok(())
}
