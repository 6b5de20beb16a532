//! Generate, save, reload and split the synthetic gesture set.
//!
//! Each class is a distinct motion pattern (translations, rotation,
//! expansion, ...) rendered as an event stream with background noise.
//! The same seed always yields byte-identical files.
//!
//!     cargo run --example synth_dataset

use sma_snn::events::{load_dataset, save_dataset, split_dataset, synth_gestures, SynthConfig};
use sma_snn::Result;

fn main() -> Result<()> {
    let cfg = SynthConfig {
        classes: 4,
        samples_per_class: 12,
        width: 32,
        height: 32,
        events_per_sample: 800,
        noise_rate: 0.05,
        seed: 7,
    };
    let streams = synth_gestures(&cfg)?;
    println!(
        "{} streams, {} per class, {} events each",
        streams.len(),
        cfg.samples_per_class,
        cfg.events_per_sample
    );

    let dir = std::env::temp_dir().join("sma-snn-synth-example");
    save_dataset(&dir, &streams)?;
    let reloaded = load_dataset(&dir)?;
    assert_eq!(streams, reloaded, "disk round trip must be lossless");
    println!("saved and reloaded losslessly from {}", dir.display());

    let (train, test) = split_dataset(&reloaded, 0.75, cfg.seed)?;
    let count = |set: &[sma_snn::events::EventStream], label: u16| {
        set.iter().filter(|s| s.label == label).count()
    };
    println!("\nstratified 75/25 split:");
    println!("class   train   test");
    for label in 0..cfg.classes as u16 {
        println!("{:>5}   {:>5}   {:>4}", label, count(&train, label), count(&test, label));
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
