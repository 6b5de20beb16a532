//! One spiking multiscale attention block, dissected.
//!
//! Runs an SMA layer on a random spike tensor and prints what the two
//! squeeze-excitation branches produce: per-timestep scale weights, per
//! (timestep, channel) scale weights, and the resulting importance shares.
//! Both weight families are softmax-normalized over the scale axis, so
//! every printed group sums to one.
//!
//!     cargo run --example sma_attention

use sma_snn::graph::{Graph, Mode};
use sma_snn::params::{Bindings, ParamStore};
use sma_snn::rng::{derive, tag};
use sma_snn::sma::{decoder_param_counts, sma_param_counts, SmaConfig, SmaLayer};
use sma_snn::tensor::Tensor;
use sma_snn::Result;
use rand::Rng;

fn main() -> Result<()> {
    let cfg = SmaConfig {
        scales: 3,
        kernel_sizes: vec![1, 3, 5],
        channel_reduction: 4,
        time_reduction: 2,
        ..SmaConfig::default()
    };
    let (t, b, c, h, w) = (4, 2, 8, 6, 6);

    let layer = SmaLayer::new("demo", cfg.clone(), t, c)?;
    let mut store = ParamStore::new();
    layer.init(&mut store, 11)?;
    println!(
        "registered {} tensors, {} scalars",
        store.len(),
        store.scalar_count(true)
    );
    let (dec_w, dec_b) = decoder_param_counts(t, c, &cfg);
    println!(
        "decoder closed form: {} weights + {} biases; whole block {}",
        dec_w,
        dec_b,
        sma_param_counts(t, c, &cfg)
    );

    // random binary spikes in, attention-recalibrated features out
    let mut rng = derive(3, &[tag("spikes")]);
    let x = Tensor::from_vec(
        &[t * b, c, h, w],
        (0..t * b * c * h * w)
            .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut binds = Bindings::new();
    let (z, trace) = layer.forward_traced(&mut g, &mut store, &mut binds, xv, Mode::Eval)?;
    println!("\ninput  [T*B, C, H, W] = [{}, {}, {}, {}]", t * b, c, h, w);
    println!("output {}", g.value(z).shape());

    println!("\ntime-wise scale weights, sample 0 (rows sum to 1):");
    let wa = trace.w_alpha.data();
    let n = cfg.scales;
    for step in 0..t {
        let row: Vec<f64> = (0..n).map(|s| wa[(0 * n + s) * t + step]).collect();
        let sum: f64 = row.iter().sum();
        println!(
            "  t={}  {:?}  sum {:.6}",
            step,
            row.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            sum
        );
    }

    println!("\nmean importance share per scale (sums to 1):");
    for (scale, share) in trace.importance.iter().enumerate() {
        println!(
            "  kernel {}x{}  {:.4}",
            cfg.kernel_sizes[scale], cfg.kernel_sizes[scale], share
        );
    }
    Ok(())
}
