// SPDX-License-Identifier: MIT OR Apache-2.0

//! Zero-K: zero the top-magnitude dimensions of sink key vectors and watch
//! attention mass on the sink collapse.
//!
//! The model is built so a single key dimension carries the whole
//! query-sink dot product, the regime where top-1 Zero-K bites hardest.
//!
//! ```bash
//! cargo run --example zero_k_study
//! ```

use sinklab::harness::{dominant_dim_setup, run_zero_k_study};

fn main() -> sinklab::Result<()> {
    let (model, x0, detection) = dominant_dim_setup();
    let study = run_zero_k_study(&model, &x0, &detection, &[0, 1, 5, 10])?;

    println!("mean attention mass on sink columns per layer:");
    print!("{:<8}", "k");
    for layer in 0..model.config.num_layers {
        print!("{:>12}", format!("layer {layer}"));
    }
    println!();
    for k in [0usize, 1, 5, 10] {
        print!("{k:<8}");
        for layer in 0..model.config.num_layers {
            let point = study
                .curves
                .iter()
                .find(|c| c.k == k && c.layer == layer)
                .expect("curve point");
            print!("{:>12.4}", point.intervened);
        }
        println!();
    }

    if let Some(diff) = &study.diff {
        let (layer, head, base, intervened) = &diff.maps[0];
        println!(
            "\nattention row deltas at layer {layer}, head {head} (top-{}):",
            diff.k
        );
        for i in 0..base.rows().min(4) {
            let before = base.get(i, 0);
            let after = intervened.get(i, 0);
            println!("  row {i}: sink column {before:.4} -> {after:.4}");
        }
    }
    Ok(())
}
