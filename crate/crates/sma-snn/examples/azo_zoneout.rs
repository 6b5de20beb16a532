//! Attention-guided zoneout on a feature sequence.
//!
//! AZO reads the attention weights an SMA block produced, ranks the
//! (timestep, channel) sites by attention mass, and during training
//! replaces the weakest sites with the same channel from the previous
//! timestep. Timestep 0 has no predecessor and is never touched. In eval
//! mode the op is the identity.
//!
//!     cargo run --example azo_zoneout

use sma_snn::azo::{azo_forward, loop_vectorized_equal, plan, AzoConfig};
use sma_snn::graph::{Graph, Mode};
use sma_snn::tensor::Tensor;
use sma_snn::Result;
use rand::Rng;

fn main() -> Result<()> {
    let (t, b, c, h, w) = (4, 1, 6, 3, 3);
    let cfg = AzoConfig {
        rtr: 2.0, // replace floor(T/2) = 2 timesteps per sample
        rcr: 3.0, // floor(C/3) = 2 channels per selected timestep
        ..AzoConfig::default()
    };
    let (dt, dc) = cfg.deltas(t, c);
    println!("T={} C={} rtr={} rcr={} -> replace {} timesteps x {} channels", t, c, cfg.rtr, cfg.rcr, dt, dc);

    let mut rng = sma_snn::rng::derive(5, &[0]);
    let rand = |dims: &[usize], rng: &mut sma_snn::rng::SeededRng| {
        let data: Vec<f64> = (0..dims.iter().product::<usize>())
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        Tensor::from_vec(dims, data).unwrap()
    };
    let n = 3; // scale count the attention weights came from
    let w_alpha = rand(&[b, n, t], &mut rng);
    let w_beta = rand(&[t, b, n, c], &mut rng);
    let z = rand(&[t * b, c, h, w], &mut rng);

    // the plan alone, before any tensor is touched
    for (sample, report) in plan(&w_alpha, &w_beta, &cfg)?.iter().enumerate() {
        println!(
            "sample {}: weakest timesteps {:?}, per-timestep channels {:?}",
            sample, report.selected_t, report.selected_c
        );
    }

    // training mode rewrites the selected planes ...
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let (train_out, reports) = azo_forward(&mut g, zv, &w_alpha, &w_beta, &cfg, Mode::Train)?;
    let changed = g
        .value(train_out)
        .data()
        .iter()
        .zip(z.data())
        .filter(|(a, b)| a != b)
        .count();
    println!(
        "\ntraining pass: {} of {} values changed ({} sites x {} pixels)",
        changed,
        z.numel(),
        reports.iter().map(|r| r.replaced_sites).sum::<usize>(),
        h * w
    );

    // ... eval mode changes nothing and files no reports
    let zv2 = g.constant(z.clone());
    let (eval_out, eval_reports) = azo_forward(&mut g, zv2, &w_alpha, &w_beta, &cfg, Mode::Eval)?;
    assert_eq!(g.value(eval_out).data(), z.data());
    assert!(eval_reports.is_empty());
    println!("eval pass: identity, no reports");

    // the vectorized gather matches a plain nested-loop rewrite bitwise
    assert!(loop_vectorized_equal(&z, &w_alpha, &w_beta, &cfg)?);
    println!("vectorized path == reference loop, bit for bit");
    Ok(())
}
