//! Sweep one knob at a time and tabulate the cost.
//!
//! Uses the same cell machinery as the `ablate` subcommand to vary the
//! scale count and the squeeze ratios on a fixed VGG, reporting parameter
//! counts without training anything. Cells that cannot build, such as a
//! channel squeeze that does not divide a block width, are reported as
//! skipped with the reason instead of aborting the sweep.
//!
//!     cargo run --example ablation_grid

use sma_snn::cli::{parse_grid, AblateCell};
use sma_snn::model::config::ModelConfig;
use sma_snn::model::Model;
use sma_snn::sma::{sma_param_counts, SmaConfig};
use sma_snn::Result;

fn main() -> Result<()> {
    let base = ModelConfig::desk_vgg(8, 10, 32, 32);

    println!("axis      cell   result");
    for (axis, grid) in [("scales", "2,3,4"), ("cr-tr", "4:4,8:2,3:4")] {
        for cell in parse_grid(axis, grid)? {
            let mut cfg = base.clone();
            cell.apply(&mut cfg);
            match Model::build(cfg, 1) {
                Ok(m) => println!("{:<9} {:<6} {} parameters", axis, cell.label(), m.param_count()),
                Err(e) => println!("{:<9} {:<6} skipped: {}", axis, cell.label(), e),
            }
        }
    }

    // the closed form predicts the jump from adding one scale
    let t = 8;
    let c = 32; // block 2 width in the desk VGG
    let mk = |n: usize| SmaConfig {
        scales: n,
        kernel_sizes: (0..n).map(|i| 2 * i + 1).collect(),
        channel_reduction: 4,
        time_reduction: 4,
        ..SmaConfig::default()
    };
    for n in 2..=4 {
        println!(
            "one SMA block at T={}, C={}, N={}: {} parameters",
            t,
            c,
            n,
            sma_param_counts(t, c, &mk(n))
        );
    }

    let three: Vec<AblateCell> = parse_grid("scales", "3")?;
    println!("\na parsed cell pretty-prints as {:?}", three[0].label());
    Ok(())
}
