//! Save a model mid-training, reload it, and prove nothing drifted.
//!
//! Checkpoints store the parameters, the optimizer's moment estimates and
//! the model's own config in one container file, so a run can resume on a
//! machine that has only the file. Reloading re-derives the architecture
//! from the embedded config and replays logits bit for bit.
//!
//!     cargo run --example checkpoint_roundtrip

use sma_snn::events::{bin_events, synth_gestures, SynthConfig};
use sma_snn::graph::{Graph, Mode};
use sma_snn::model::config::ModelConfig;
use sma_snn::model::Model;
use sma_snn::rng::derive;
use sma_snn::train::{
    load_checkpoint, save_checkpoint, train, LossKind, OptimSpec, Optimizer, Sample, TrainConfig,
};
use sma_snn::Result;
use indexmap::IndexMap;

fn main() -> Result<()> {
    let streams = synth_gestures(&SynthConfig {
        classes: 2,
        samples_per_class: 6,
        width: 16,
        height: 16,
        events_per_sample: 300,
        noise_rate: 0.05,
        seed: 8,
    })?;
    let t = 4;
    let set: Vec<Sample> = streams
        .iter()
        .map(|s| Ok((bin_events(s, t)?, s.label as usize)))
        .collect::<Result<_>>()?;

    let mut cfg = ModelConfig::desk_vgg(t, 2, 16, 16);
    cfg.blocks.truncate(2);
    cfg.blocks[0].width = 8;
    cfg.blocks[1].width = 16;
    cfg.head.hidden = Some(16);
    cfg.head.dropout = Some(0.0);
    let mut model = Model::build(cfg, 30)?;
    let mut opt = Optimizer::new(OptimSpec::adam(1e-3))?;
    let tc = TrainConfig {
        epochs: 2,
        start_epoch: 0,
        batch_size: 4,
        loss: LossKind::RateMse,
        seed: 12,
        early_stop: None,
    };
    train(&mut model, &mut opt, &set, &set, &tc, None)?;
    println!("trained 2 epochs, optimizer at step {}", opt.step_count());

    let path = std::env::temp_dir().join("sma-snn-roundtrip.snnp");
    let mut meta = IndexMap::new();
    meta.insert("note".to_string(), "example checkpoint".to_string());
    save_checkpoint(&path, &model, &opt, &meta)?;
    println!("saved {}", path.display());

    let (mut reloaded, re_opt, meta) = load_checkpoint(&path)?;
    println!(
        "reloaded: {} params, optimizer step {}, note = {:?}",
        reloaded.param_count(),
        re_opt.step_count(),
        meta.get("note").map(String::as_str).unwrap_or("-")
    );

    // bit-identical logits on the same input
    let probe = &set[0].0;
    let logits = |m: &mut Model| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(probe.clone());
        let mut rng = derive(0, &[]);
        let fwd = m.forward(&mut g, xv, Mode::Eval, &mut rng)?;
        Ok(g.value(fwd.logits).data().to_vec())
    };
    let (a, b) = (logits(&mut model)?, logits(&mut reloaded)?);
    assert_eq!(a, b, "reloaded model must replay logits exactly");
    println!("logits replay bit for bit: {:?}", &a[..2.min(a.len())]);
    std::fs::remove_file(&path).ok();
    Ok(())
}
