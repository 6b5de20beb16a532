//! Forward pass through the membrane-shortcut spiking ResNet.
//!
//! Builds the two-stage residual network, runs a batch of random frames,
//! and prints the per-layer spike rates. Residual blocks add their input
//! back after the LIF-conv-BN stack, so depth never has to fight vanishing
//! spikes; stages after the first open with a strided transition that
//! halves the grid and widens the features before attention.
//!
//!     cargo run --example resnet_forward

use sma_snn::graph::{Graph, Mode};
use sma_snn::model::config::ModelConfig;
use sma_snn::model::Model;
use sma_snn::rng::{derive, tag};
use sma_snn::tensor::Tensor;
use sma_snn::Result;
use rand::Rng;

fn main() -> Result<()> {
    let cfg = ModelConfig::desk_ms_resnet(4, 10, 32, 32);
    let mut model = Model::build(cfg, 9)?;
    println!(
        "{} timesteps, {} classes, {} parameters",
        model.timesteps(),
        model.classes(),
        model.param_count()
    );
    println!("SMA attached to blocks {:?} of the block list", model.sma_blocks());
    println!("spiking layers: {}", model.lif_paths().join(", "));

    let (t, b) = (model.timesteps(), 2);
    let mut rng = derive(1, &[tag("frames")]);
    let x = Tensor::from_vec(
        &[t * b, 2, 32, 32],
        (0..t * b * 2 * 32 * 32)
            .map(|_| if rng.gen_bool(0.1) { 1.0 } else { 0.0 })
            .collect(),
    )?;

    let mut g = Graph::new();
    let xv = g.constant(x);
    let fwd = model.forward(&mut g, xv, Mode::Eval, &mut rng)?;
    println!("\nlogits {}", g.value(fwd.logits).shape());

    println!("\nlayer                     spikes    rate");
    for s in &fwd.spikes {
        println!("{:<24} {:>8}  {:.4}", s.path, s.count, s.rate());
    }
    let (_, trace) = &fwd.traces[0];
    println!("\nfirst attention site importance: {:?}", trace.importance);
    Ok(())
}
