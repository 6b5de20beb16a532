//! Export a spatial firing-rate map as a PGM image.
//!
//! Feeds one synthetic gesture through a freshly built model, captures the
//! spike tensor of the first LIF layer, averages it over time and channels
//! into an [H, W] grid, and writes it as a portable graymap next to a CSV
//! of the raw values. White pixels fire most.
//!
//!     cargo run --example spike_heatmap

use sma_snn::events::{bin_events, synth_gestures, SynthConfig};
use sma_snn::graph::{Graph, Mode};
use sma_snn::model::config::ModelConfig;
use sma_snn::model::Model;
use sma_snn::pgm::{pgm_bytes, write_pgm};
use sma_snn::rng::{derive, tag};
use sma_snn::Result;

fn main() -> Result<()> {
    let streams = synth_gestures(&SynthConfig {
        classes: 2,
        samples_per_class: 1,
        width: 32,
        height: 32,
        events_per_sample: 1500,
        noise_rate: 0.02,
        seed: 2,
    })?;
    let t = 8;
    let x = bin_events(&streams[0], t)?;

    let mut model = Model::build(ModelConfig::desk_vgg(t, 2, 32, 32), 4)?;
    let layer = model.lif_paths().remove(0);
    println!("capturing spikes at {:?}", layer);

    let mut g = Graph::new();
    let xv = g.constant(x); // batch of one, time-major rows
    let mut rng = derive(0, &[tag("heatmap")]);
    let fwd = model.forward_captured(&mut g, xv, Mode::Eval, &mut rng, &[layer.clone()])?;
    let (_, spikes) = &fwd.captured[0];

    let d = spikes.dims().to_vec();
    let (rows, c, h, w) = (d[0], d[1], d[2], d[3]);
    let mut grid = vec![0.0; h * w];
    for r in 0..rows {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    grid[y * w + xx] += spikes.data()[((r * c + ch) * h + y) * w + xx];
                }
            }
        }
    }
    for v in &mut grid {
        *v /= (rows * c) as f64;
    }

    let out = std::env::temp_dir().join("sma-snn-heatmap.pgm");
    write_pgm(&out, &grid, w, h)?;
    let bytes = pgm_bytes(&grid, w, h)?;
    println!("wrote {} ({} bytes, {}x{} grid)", out.display(), bytes.len(), w, h);
    let peak = grid.iter().cloned().fold(0.0f64, f64::max);
    println!("peak mean firing rate {:.4}", peak);
    Ok(())
}
