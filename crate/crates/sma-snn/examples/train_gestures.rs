//! End-to-end training on the synthetic gesture set.
//!
//! Generates a small 2-class event dataset, bins it, trains a compact
//! SMA-VGG for a few epochs with Adam, and evaluates the best checkpoint.
//! Runs in well under a minute; bump per-class, epochs and the model's
//! widths for a real experiment.
//!
//!     cargo run --release --example train_gestures

use sma_snn::events::{bin_events, split_dataset, synth_gestures, SynthConfig};
use sma_snn::model::config::ModelConfig;
use sma_snn::model::Model;
use sma_snn::train::{evaluate, train, LossKind, OptimSpec, Optimizer, Sample, TrainConfig};
use sma_snn::Result;

fn main() -> Result<()> {
    let data = SynthConfig {
        classes: 2,
        samples_per_class: 12,
        width: 16,
        height: 16,
        events_per_sample: 400,
        noise_rate: 0.05,
        seed: 21,
    };
    let streams = synth_gestures(&data)?;
    let (train_streams, test_streams) = split_dataset(&streams, 0.75, 3)?;

    let t = 4;
    let bin = |ss: &[sma_snn::events::EventStream]| -> Result<Vec<Sample>> {
        ss.iter().map(|s| Ok((bin_events(s, t)?, s.label as usize))).collect()
    };
    let (train_set, test_set) = (bin(&train_streams)?, bin(&test_streams)?);
    println!("{} train / {} test samples, {} timesteps", train_set.len(), test_set.len(), t);

    let mut cfg = ModelConfig::desk_vgg(t, 2, 16, 16);
    cfg.blocks.truncate(2);
    cfg.blocks[0].width = 8;
    cfg.blocks[1].width = 16;
    cfg.head.hidden = Some(32);
    cfg.head.dropout = Some(0.0);
    let mut model = Model::build(cfg, 17)?;
    println!("model: {} parameters, SMA on blocks {:?}", model.param_count(), model.sma_blocks());

    let mut opt = Optimizer::new(OptimSpec::adam(1e-3))?;
    let tc = TrainConfig {
        epochs: 10,
        start_epoch: 0,
        batch_size: 6,
        loss: LossKind::RateMse,
        seed: 5,
        early_stop: Some(0.99),
    };
    let outcome = train(&mut model, &mut opt, &train_set, &test_set, &tc, None)?;
    println!("\nepoch   split   loss        accuracy");
    for m in &outcome.history {
        println!("{:>5}   {:<5}   {:<9.6}   {:.3}", m.epoch, m.split, m.loss, m.accuracy);
    }
    println!(
        "\nbest test accuracy {:.3} at epoch {}",
        outcome.best_accuracy, outcome.best_epoch
    );

    let report = evaluate(&mut model, &test_set, 6, tc.loss)?;
    println!("final eval: {}/{} correct", report.correct, report.total);
    for (path, sfr) in &report.sfr {
        println!("  {:<12} mean firing rate {:.4}", path, sfr);
    }
    Ok(())
}
