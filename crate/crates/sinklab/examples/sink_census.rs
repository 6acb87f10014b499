// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer sink counts under both identification criteria.
//!
//! The input loads a majority of tokens on one sink dimension, which the
//! ratio-based VLM criterion flags broadly at every layer, while the
//! absolute-magnitude LLM criterion stays sparse.
//!
//! ```bash
//! cargo run --example sink_census
//! ```

use sinklab::harness::{gen_synthetic_sequence, overidentification_setup, run_sink_census};
use sinklab::Model;

fn main() -> sinklab::Result<()> {
    let (config, spec, detection) = overidentification_setup(11);
    let model = Model::init_seeded(config)?;
    let x0 = gen_synthetic_sequence(&spec, config.hidden_dim)?;
    let census = run_sink_census(&model, &x0, &detection)?;

    let n = spec.layout.len();
    println!(
        "tokens: {n} ({} modality + {} text)",
        spec.layout.num_modality, spec.layout.num_text
    );
    println!("{:<8}{:>12}{:>12}", "layer", "llm sinks", "vlm sinks");
    for row in &census.layers {
        println!(
            "{:<8}{:>12}{:>12}",
            row.layer,
            row.llm_count,
            row.vlm_count.unwrap_or(0)
        );
    }
    println!(
        "totals: llm={} vlm={} (vlm flags {:.0}% of tokens per layer)",
        census.total_llm,
        census.total_vlm,
        100.0 * census.total_vlm as f64 / (n * census.layers.len()) as f64
    );
    Ok(())
}
