//! Scratch sweep for the three-seed directional setup. Not part of the
//! shipped examples; delete after use.

use sma_snn::events::{bin_events, split_dataset, synth_gestures, EventStream, SynthConfig};
use sma_snn::model::config::ModelConfig;
use sma_snn::model::Model;
use sma_snn::train::{evaluate, train, LossKind, OptimSpec, Optimizer, Sample, TrainConfig, TrainOutcome};

struct SeedRun {
    test_acc: f64,
    gap: f64,
    eval_spikes: f64,
}

fn gesture_dataset(
    classes: usize,
    per_class: usize,
    side: u16,
    events: usize,
    t: usize,
    ratio: f64,
    noise: f64,
    seed: u64,
) -> (Vec<Sample>, Vec<Sample>) {
    let streams = synth_gestures(&SynthConfig {
        classes,
        samples_per_class: per_class,
        width: side,
        height: side,
        events_per_sample: events,
        noise_rate: noise,
        seed,
    })
    .unwrap();
    let (tr, te) = split_dataset(&streams, ratio, seed).unwrap();
    let bin = |ss: &[EventStream]| {
        ss.iter()
            .map(|s| (bin_events(s, t).unwrap(), s.label as usize))
            .collect::<Vec<Sample>>()
    };
    (bin(&tr), bin(&te))
}

fn run_variant(
    cfg: &ModelConfig,
    train_set: &[Sample],
    test_set: &[Sample],
    seed: u64,
    epochs: usize,
) -> SeedRun {
    let tc = TrainConfig {
        epochs,
        start_epoch: 0,
        batch_size: 10,
        loss: LossKind::RateMse,
        seed,
        early_stop: None,
    };
    let mut model = Model::build(cfg.clone(), seed).unwrap();
    let mut opt = Optimizer::new(OptimSpec::adam(1e-3)).unwrap();
    let TrainOutcome { history, .. } =
        train(&mut model, &mut opt, train_set, test_set, &tc, None).unwrap();
    let last_train = history.iter().rev().find(|m| m.split == "train").unwrap();
    let last_test = history.iter().rev().find(|m| m.split == "test").unwrap();
    let report = evaluate(&mut model, test_set, 10, tc.loss).unwrap();
    SeedRun {
        test_acc: last_test.accuracy,
        gap: last_train.accuracy - last_test.accuracy,
        eval_spikes: report.spike_counts.iter().map(|(_, c)| c).sum(),
    }
}

struct Knobs {
    noise: f64,
    events: usize,
    epochs: usize,
    widths: Vec<usize>,
    hidden: Option<usize>,
    scales: usize,
    kernels: Vec<usize>,
    classes: usize,
    encoder: &'static str,
}

fn sweep(name: &str, k: &Knobs) {
    let (train_set, test_set) =
        gesture_dataset(k.classes, 30, 16, k.events, 4, 0.75, k.noise, 515);

    let mut base = ModelConfig::desk_vgg(4, k.classes, 16, 16);
    base.blocks.truncate(k.widths.len());
    for (b, w) in base.blocks.iter_mut().zip(&k.widths) {
        b.width = *w;
    }
    base.head.hidden = k.hidden;
    base.sma.scales = k.scales;
    base.sma.kernels = k.kernels.clone();
    base.sma.cr = 4;
    base.sma.tr = Some(2);
    base.sma.encoder = k.encoder.into();

    let mut with_sma = base.clone();
    with_sma.placement = "T3+L1".into();
    let mut without_sma = base.clone();
    without_sma.placement = "T1+L1".into();
    let mut with_azo = with_sma.clone();
    with_azo.azo.enabled = true;
    with_azo.azo.rtr = 2.0;
    with_azo.azo.rcr = 4.0;

    let seeds = [11u64, 23, 37];
    let mut sma = Vec::new();
    let mut plain = Vec::new();
    let mut azo = Vec::new();
    for &seed in &seeds {
        sma.push(run_variant(&with_sma, &train_set, &test_set, seed, k.epochs));
        plain.push(run_variant(&without_sma, &train_set, &test_set, seed, k.epochs));
        azo.push(run_variant(&with_azo, &train_set, &test_set, seed, k.epochs));
    }
    let mean = |rs: &[SeedRun], f: fn(&SeedRun) -> f64| -> f64 {
        rs.iter().map(f).sum::<f64>() / rs.len() as f64
    };

    let acc_sma = mean(&sma, |r| r.test_acc);
    let acc_plain = mean(&plain, |r| r.test_acc);
    let gap_azo = mean(&azo, |r| r.gap);
    let gap_sma = mean(&sma, |r| r.gap);
    let spikes_sma = mean(&sma, |r| r.eval_spikes);
    let spikes_plain = mean(&plain, |r| r.eval_spikes);

    let a = acc_sma >= acc_plain - 0.02;
    let b = gap_azo <= gap_sma + 0.02;
    let c = spikes_sma <= spikes_plain * 1.02;
    println!(
        "{name}: acc {acc_sma:.3} vs {acc_plain:.3} [{}] | gap azo {gap_azo:.3} vs {gap_sma:.3} [{}] | spikes {spikes_sma:.0} vs {spikes_plain:.0} ratio {:.3} [{}]",
        if a { "ok" } else { "X" },
        if b { "ok" } else { "X" },
        spikes_sma / spikes_plain,
        if c { "ok" } else { "X" },
    );
    for (i, seed) in seeds.iter().enumerate() {
        println!(
            "    seed {seed}: sma acc {:.3} gap {:+.3} sp {:.0} | plain acc {:.3} gap {:+.3} sp {:.0} | azo acc {:.3} gap {:+.3}",
            sma[i].test_acc, sma[i].gap, sma[i].eval_spikes,
            plain[i].test_acc, plain[i].gap, plain[i].eval_spikes,
            azo[i].test_acc, azo[i].gap,
        );
    }
}

fn layer_diag(noise: f64, events: usize, epochs: usize, seed: u64) {
    let (train_set, test_set) = gesture_dataset(4, 30, 16, events, 4, 0.75, noise, 515);
    let mut base = ModelConfig::desk_vgg(4, 4, 16, 16);
    base.blocks.truncate(2);
    base.blocks[0].width = 8;
    base.blocks[1].width = 16;
    base.head.hidden = Some(64);
    base.sma.scales = 2;
    base.sma.kernels = vec![1, 3];
    base.sma.cr = 4;
    base.sma.tr = Some(2);
    for (tag, placement) in [("sma", "T3+L1"), ("plain", "T1+L1")] {
        let mut cfg = base.clone();
        cfg.placement = placement.into();
        let tc = TrainConfig {
            epochs,
            start_epoch: 0,
            batch_size: 10,
            loss: LossKind::RateMse,
            seed,
            early_stop: None,
        };
        let mut model = Model::build(cfg, seed).unwrap();
        let mut opt = Optimizer::new(OptimSpec::adam(1e-3)).unwrap();
        train(&mut model, &mut opt, &train_set, &test_set, &tc, None).unwrap();
        let report = evaluate(&mut model, &test_set, 10, tc.loss).unwrap();
        print!("    {tag}:");
        for (name, c) in &report.spike_counts {
            print!(" {name}={c:.0}");
        }
        println!();
    }
}

fn main() {
    let pick: Vec<String> = std::env::args().skip(1).collect();
    let all = pick.is_empty();
    let want = |n: &str| all || pick.iter().any(|p| p == n);

    if want("diag") {
        layer_diag(0.05, 500, 12, 11);
        return;
    }

    let base = Knobs {
        noise: 0.05,
        events: 500,
        epochs: 12,
        widths: vec![8, 16],
        hidden: Some(64),
        scales: 2,
        kernels: vec![1, 3],
        classes: 4,
        encoder: "relu",
    };
    if want("base") {
        sweep("base(2blk,N2)", &base);
    }
    if want("lif") {
        sweep(
            "lif(2blk,N2,lif-enc)",
            &Knobs {
                widths: vec![8, 16],
                kernels: base.kernels.clone(),
                encoder: "lif",
                ..base
            },
        );
    }
    if want("hard") {
        sweep(
            "hard(6cls,ev300,n.5)",
            &Knobs {
                widths: vec![8, 16],
                kernels: base.kernels.clone(),
                classes: 6,
                events: 300,
                noise: 0.5,
                ..base
            },
        );
    }
    if want("hardlif") {
        sweep(
            "hardlif(6cls,ev300,n.5,lif-enc)",
            &Knobs {
                widths: vec![8, 16],
                kernels: base.kernels.clone(),
                classes: 6,
                events: 300,
                noise: 0.5,
                encoder: "lif",
                ..base
            },
        );
    }
    if want("tiny") {
        sweep(
            "tiny(4/8,nohid,6cls,ev300,n.5)",
            &Knobs {
                widths: vec![4, 8],
                kernels: base.kernels.clone(),
                hidden: None,
                classes: 6,
                events: 300,
                noise: 0.5,
                ..base
            },
        );
    }
    if want("tiny2") {
        sweep(
            "tiny2(4/8,nohid,6cls,ev200,n.6,e8)",
            &Knobs {
                widths: vec![4, 8],
                kernels: base.kernels.clone(),
                hidden: None,
                classes: 6,
                events: 200,
                noise: 0.6,
                epochs: 8,
                ..base
            },
        );
    }
}
