//! Acceptance gate: ten checks covering gradients, neuron dynamics, the
//! attention oracles, zoneout, event handling, parameter accounting,
//! end-to-end learning, directional effects and reproducibility.
//!
//! Each check prints one `[PASS]`/`[FAIL]` line; run with
//! `cargo test --test acceptance -- --nocapture --test-threads=1` to see
//! them in order and to give the timed checks the whole machine.

use rand::Rng;
use sma_snn::azo::{apply_loop, azo_forward, loop_vectorized_equal, plan, AzoConfig};
use sma_snn::events::{
    bin_events, slice_bounds, split_dataset, synth_gestures, Event, EventStream, SynthConfig,
};
use sma_snn::gradcheck::{check_gradients, CheckCfg};
use sma_snn::cli::{load_samples, DataConfig, ExperimentConfig};
use sma_snn::graph::{BnCfg, Graph, Mode, Value};
use sma_snn::model::config::ModelConfig;
use sma_snn::model::Model;
use sma_snn::neuron::{lif_sequence, lif_step_values, NeuronConfig, SpikeMode, Surrogate};
use sma_snn::params::{Bindings, ParamStore};
use sma_snn::rng::{derive, tag, SeededRng};
use sma_snn::sma::{decoder_param_counts, EncoderAct, SmaConfig, SmaLayer, SmaParts};
use sma_snn::tensor::Tensor;
use sma_snn::train::{
    evaluate, train, LossKind, OptimSpec, Optimizer, Sample, TrainConfig, TrainOutcome,
};
use std::time::Instant;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "[{}] {:02} {}: {}",
        if pass { "PASS" } else { "FAIL" },
        id,
        name,
        detail
    );
    assert!(pass, "check {:02} {} failed: {}", id, name, detail);
}

fn rand_tensor(dims: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor {
    let data = (0..dims.iter().product::<usize>())
        .map(|_| rng.gen_range(lo..hi))
        .collect();
    Tensor::from_vec(dims, data).unwrap()
}

/// Uniform values with magnitude >= 0.05, so kinked ops (relu, max pool)
/// never sit within a finite-difference step of their kink.
fn rand_away_from_zero(dims: &[usize], rng: &mut SeededRng) -> Tensor {
    let data = (0..dims.iter().product::<usize>())
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(dims, data).unwrap()
}

// ---------------------------------------------------------------------------
// 01: every differentiable op, plus the whole ReLU-encoder SMA block,
// against central finite differences

#[test]
fn c01_gradients_match_central_differences() {
    let started = Instant::now();
    let cfg = CheckCfg::default(); // rel 1e-4, 20 coordinates per input
    let mut worst: f64 = 0.0;
    let mut coords = 0usize;

    type BuildFn = fn(&mut Graph, &[Value]) -> sma_snn::Result<Value>;
    let ops: Vec<(&str, Vec<Vec<usize>>, BuildFn)> = vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let s = g.add(v[0], v[1])?;
            g.mean_all(s)
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let s = g.sub(v[0], v[1])?;
            g.mean_all(s)
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let s = g.mul(v[0], v[1])?;
            g.mean_all(s)
        }),
        ("affine_scalar", vec![vec![2, 5]], |g, v| {
            let s = g.affine_scalar(v[0], 1.7, -0.4);
            let s = g.mul(s, s)?;
            g.mean_all(s)
        }),
        ("scale", vec![vec![2, 5]], |g, v| {
            let s = g.scale(v[0], -2.5);
            let s = g.mul(s, s)?;
            g.mean_all(s)
        }),
        ("relu", vec![vec![4, 6]], |g, v| {
            let s = g.relu(v[0]);
            let s = g.mul(s, s)?;
            g.mean_all(s)
        }),
        ("smooth_spike", vec![vec![4, 6]], |g, v| {
            let s = g.smooth_spike(v[0], Surrogate::ATan { alpha: 2.0 });
            g.mean_all(s)
        }),
        ("conv2d", vec![vec![2, 3, 5, 5], vec![4, 3, 3, 3], vec![4]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let y = g.mul(y, y)?;
            g.mean_all(y)
        }),
        ("conv2d_strided", vec![vec![2, 2, 6, 6], vec![3, 2, 3, 3]], |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 0)?;
            let y = g.mul(y, y)?;
            g.mean_all(y)
        }),
        ("affine", vec![vec![4, 3], vec![3, 5], vec![5]], |g, v| {
            let y = g.affine(v[0], v[1], Some(v[2]))?;
            let y = g.mul(y, y)?;
            g.mean_all(y)
        }),
        ("batch_norm_train", vec![vec![6, 3, 2, 2], vec![3], vec![3]], |g, v| {
            let mut rm = Tensor::zeros(&[3]);
            let mut rv = Tensor::ones(&[3]);
            let y = g.batch_norm(v[0], v[1], v[2], &mut rm, &mut rv, BnCfg::default(), Mode::Train)?;
            let y = g.mul(y, y)?;
            g.mean_all(y)
        }),
        ("batch_norm_eval", vec![vec![6, 3, 2, 2], vec![3], vec![3]], |g, v| {
            let mut rm = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
            let mut rv = Tensor::from_vec(&[3], vec![0.9, 1.4, 0.7]).unwrap();
            let y = g.batch_norm(v[0], v[1], v[2], &mut rm, &mut rv, BnCfg::default(), Mode::Eval)?;
            let y = g.mul(y, y)?;
            g.mean_all(y)
        }),
        ("max_pool", vec![vec![2, 2, 4, 4]], |g, v| {
            let y = g.max_pool(v[0], 2, 2, 0)?;
            g.mean_all(y)
        }),
        ("avg_pool_global", vec![vec![2, 3, 4, 4]], |g, v| {
            let y = g.avg_pool_global(v[0])?;
            let y = g.mul(y, y)?;
            g.mean_all(y)
        }),
        ("softmax", vec![vec![3, 5]], |g, v| {
            let y = g.softmax(v[0], 1)?;
            let w = g.constant(Tensor::from_vec(&[3, 5], (0..15).map(|i| (i as f64) * 0.3 - 2.0).collect()).unwrap());
            let y = g.mul(y, w)?;
            g.mean_all(y)
        }),
        ("log_softmax", vec![vec![3, 5]], |g, v| {
            let y = g.log_softmax(v[0], 1)?;
            let w = g.constant(Tensor::from_vec(&[3, 5], (0..15).map(|i| 0.1 * (i as f64) - 0.7).collect()).unwrap());
            let y = g.mul(y, w)?;
            g.mean_all(y)
        }),
        ("sum_axes", vec![vec![2, 3, 4]], |g, v| {
            let y = g.sum_axes(v[0], &[1], true)?;
            let y = g.mul(y, y)?;
            g.mean_all(y)
        }),
        ("mean_axes", vec![vec![2, 3, 4]], |g, v| {
            let y = g.mean_axes(v[0], &[0, 2], false)?;
            let y = g.mul(y, y)?;
            g.mean_all(y)
        }),
        ("sum_all", vec![vec![3, 3]], |g, v| {
            let y = g.sum_all(v[0])?;
            g.mul(y, y)
        }),
        ("mean_all", vec![vec![3, 3]], |g, v| {
            let y = g.mean_all(v[0])?;
            g.mul(y, y)
        }),
        ("reshape", vec![vec![2, 6]], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            let y = g.mul(y, y)?;
            g.mean_all(y)
        }),
        ("permute", vec![vec![2, 3, 4]], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            let w = g.constant(Tensor::from_vec(&[4, 2, 3], (0..24).map(|i| 0.2 * (i as f64) - 1.0).collect()).unwrap());
            let y = g.mul(y, w)?;
            g.mean_all(y)
        }),
        ("narrow", vec![vec![4, 5]], |g, v| {
            let y = g.narrow(v[0], 1, 1, 3)?;
            let y = g.mul(y, y)?;
            g.mean_all(y)
        }),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            let y = g.mul(y, y)?;
            g.mean_all(y)
        }),
        ("gather_planes", vec![vec![4, 2, 3, 3]], |g, v| {
            let y = g.gather_planes(v[0], 2, &[0, 0, 2, 1, 7, 5, 5, 3])?;
            let y = g.mul(y, y)?;
            g.mean_all(y)
        }),
        ("dropout", vec![vec![4, 6]], |g, v| {
            let mut r = derive(99, &[tag("mask")]);
            let y = g.dropout(v[0], 0.3, &mut r)?;
            let y = g.mul(y, y)?;
            g.mean_all(y)
        }),
    ];

    for seed in 0..5u64 {
        for (name, shapes, build) in &ops {
            let mut rng = derive(seed, &[tag(name)]);
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|d| rand_away_from_zero(d, &mut rng))
                .collect();
            let out = check_gradients(build, &inputs, cfg, &mut rng).unwrap();
            assert!(
                out.ok(),
                "op {} seed {}: {} violations, max rel {:.3e}",
                name,
                seed,
                out.violations.len(),
                out.max_rel_err
            );
            worst = worst.max(out.max_rel_err);
            coords += out.coords_checked;
        }
    }

    // the whole multiscale attention block with the ReLU encoder: gradient
    // of a scalar readout with respect to the input and every trainable
    // tensor, batch-norm running stats randomized so eval mode is not a
    // pass-through
    for seed in 0..5u64 {
        let mut rng = derive(seed, &[tag("sma-grad")]);
        let cfg_sma = SmaConfig {
            scales: 2,
            kernel_sizes: vec![1, 3],
            channel_reduction: 2,
            time_reduction: 2,
            encoder_act: EncoderAct::Relu,
        };
        let (t, b, c, h, w) = (4, 2, 4, 3, 3);
        let layer = SmaLayer::new("g", cfg_sma, t, c).unwrap();
        let mut store = ParamStore::new();
        layer.init(&mut store, seed).unwrap();
        randomize_sma_store(&mut store, &mut rng);
        let trainable: Vec<String> = store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        let mut inputs = vec![rand_tensor(&[t * b, c, h, w], -1.0, 1.0, &mut rng)];
        for name in &trainable {
            inputs.push(store.get(name).unwrap().clone());
        }
        let store_ref = &store;
        let layer_ref = &layer;
        let names_ref = &trainable;
        let out = check_gradients(
            move |g, vals| {
                let mut st = store_ref.clone();
                let mut binds = Bindings::new();
                for (i, name) in names_ref.iter().enumerate() {
                    binds.preset(name, vals[i + 1]);
                }
                let z = layer_ref.forward(g, &mut st, &mut binds, vals[0], Mode::Eval)?;
                let zz = g.mul(z, z)?;
                g.mean_all(zz)
            },
            &inputs,
            cfg,
            &mut rng,
        )
        .unwrap();
        assert!(
            out.ok(),
            "SMA block seed {}: {} violations, max rel {:.3e}",
            seed,
            out.violations.len(),
            out.max_rel_err
        );
        worst = worst.max(out.max_rel_err);
        coords += out.coords_checked;
    }

    let secs = started.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient oracle (all ops + full ReLU SMA block)",
        worst <= 1e-4 && secs < 60.0,
        &format!("{} coordinates, max rel err {:.2e}, {:.1}s", coords, worst, secs),
    );
}

/// Overwrite every registered SMA tensor with random values of the same
/// shape (variances kept positive).
fn randomize_sma_store(store: &mut ParamStore, rng: &mut SeededRng) {
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let dims = store.get(&name).unwrap().dims().to_vec();
        let t = if name.ends_with(".var") {
            rand_tensor(&dims, 0.5, 2.0, rng)
        } else if name.ends_with(".gamma") {
            rand_tensor(&dims, 0.5, 1.5, rng)
        } else {
            rand_tensor(&dims, -0.6, 0.6, rng)
        };
        store.set(&name, t).unwrap();
    }
}

// ---------------------------------------------------------------------------
// 02: LIF hand cases and the binary / hard-reset invariants

#[test]
fn c02_lif_dynamics_hand_cases_and_invariants() {
    let cfg = NeuronConfig::default(); // tau 2, threshold 1, reset 0

    // quiescent neuron
    let (u, s, h) = lif_step_values(
        &cfg,
        &Tensor::zeros(&[1]),
        &Tensor::zeros(&[1]),
    )
    .unwrap();
    assert_eq!((u.data()[0], s.data()[0], h.data()[0]), (0.0, 0.0, 0.0));

    // subthreshold charge: H=0.5, I=1.2 -> U = 0.5 + 0.5*(1.2 - 0.5) = 0.85
    let (u, s, h) = lif_step_values(
        &cfg,
        &Tensor::from_vec(&[1], vec![0.5]).unwrap(),
        &Tensor::from_vec(&[1], vec![1.2]).unwrap(),
    )
    .unwrap();
    assert_eq!(u.data(), &[0.85]);
    assert_eq!(s.data(), &[0.0]);
    assert_eq!(h.data(), &[0.85]);

    // fire and hard-reset: H=0.9, I=1.5 -> U = 1.2 -> spike, H' = 0
    let (u, s, h) = lif_step_values(
        &cfg,
        &Tensor::from_vec(&[1], vec![0.9]).unwrap(),
        &Tensor::from_vec(&[1], vec![1.5]).unwrap(),
    )
    .unwrap();
    assert!((u.data()[0] - 1.2).abs() < 1e-15);
    assert_eq!(s.data(), &[1.0]);
    assert_eq!(h.data(), &[0.0]);

    // threshold boundary fires: H=0.5, I=1.5 -> U = 1.0 exactly
    let (u, s, h) = lif_step_values(
        &cfg,
        &Tensor::from_vec(&[1], vec![0.5]).unwrap(),
        &Tensor::from_vec(&[1], vec![1.5]).unwrap(),
    )
    .unwrap();
    assert_eq!((u.data()[0], s.data()[0], h.data()[0]), (1.0, 1.0, 0.0));

    // invariants over 10^5 randomized steps: spikes are exactly 0/1,
    // matching the threshold test, and the reset is hard
    let mut rng = derive(7, &[tag("lif-fuzz")]);
    let neurons = 1000;
    let steps = 100;
    let mut sites = 0usize;
    for variant in [NeuronConfig::default(), NeuronConfig { tau: 4.0, ..NeuronConfig::default() }] {
        let mut hidden = rand_tensor(&[neurons], -2.0, 2.0, &mut rng);
        for _ in 0..steps / 2 {
            let input = rand_tensor(&[neurons], -3.0, 3.0, &mut rng);
            let (u, s, h) = lif_step_values(&variant, &hidden, &input).unwrap();
            for i in 0..neurons {
                let (uv, sv, hv) = (u.data()[i], s.data()[i], h.data()[i]);
                assert!(sv == 0.0 || sv == 1.0, "non-binary spike {}", sv);
                let expect_s = if uv - variant.u_threshold >= 0.0 { 1.0 } else { 0.0 };
                assert_eq!(sv, expect_s, "threshold rule at U = {}", uv);
                if sv == 1.0 {
                    assert_eq!(hv, 0.0, "hard reset must zero the state");
                } else {
                    assert_eq!(hv, uv, "unfired state must carry U");
                }
                sites += 1;
            }
            hidden = h;
        }
    }

    // the graph path emits the same exact 0/1 codomain
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&[20, 8], -2.0, 2.0, &mut rng));
    let sv = lif_sequence(&mut g, &cfg, x, 5, SpikeMode::Binary).unwrap();
    assert!(g.value(sv).data().iter().all(|&v| v == 0.0 || v == 1.0));

    verdict(
        2,
        "LIF dynamics (hand cases + binary/hard-reset invariants)",
        sites == 100_000,
        &format!("4 hand cases exact, {} randomized steps clean", sites),
    );
}

// ---------------------------------------------------------------------------
// 03 + 04: the SMA stages against explicit scalar loops, and the softmax
// normalization of both weight families

struct SmaInstance {
    layer: SmaLayer,
    store: ParamStore,
    x: Tensor,
    t: usize,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    n: usize,
}

fn sma_instances(count: usize) -> Vec<SmaInstance> {
    let mut rng = derive(4242, &[tag("sma-oracle")]);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let t = [2usize, 3, 4, 6][rng.gen_range(0..4)];
        let c = [2usize, 4, 6, 8][rng.gen_range(0..4)];
        let n = rng.gen_range(2..=4usize);
        let tr = divisors(t)[rng.gen_range(0..divisors(t).len())];
        let cr = divisors(c)[rng.gen_range(0..divisors(c).len())];
        let (b, h, w) = (rng.gen_range(1..=2), rng.gen_range(2..=6), rng.gen_range(2..=6));
        let cfg = SmaConfig {
            scales: n,
            kernel_sizes: (0..n).map(|k| 2 * k + 1).collect(),
            channel_reduction: cr,
            time_reduction: tr,
            encoder_act: EncoderAct::Relu,
        };
        let layer = SmaLayer::new("o", cfg, t, c).unwrap();
        let mut store = ParamStore::new();
        layer.init(&mut store, i as u64).unwrap();
        randomize_sma_store(&mut store, &mut rng);
        let x = rand_tensor(&[t * b, c, h, w], -1.0, 1.0, &mut rng);
        out.push(SmaInstance { layer, store, x, t, b, c, h, w, n });
    }
    out
}

fn divisors(v: usize) -> Vec<usize> {
    (1..=v).filter(|d| v % d == 0).collect()
}

/// Plain-loop re-implementation of the whole block, returning the same
/// intermediates as `forward_parts`.
fn sma_scalar_reference(inst: &SmaInstance) -> SmaParts {
    let (t, b, c, h, w, n) = (inst.t, inst.b, inst.c, inst.h, inst.w, inst.n);
    let rows = t * b;
    let st = &inst.store;
    let g = |name: &str| st.get(&format!("o.{}", name)).unwrap();
    let eps = 1e-5;

    let conv_same = |x: &[f64], k: &Tensor, cin: usize, cout: usize| -> Vec<f64> {
        let ks = k.dims()[2];
        let pad = ks / 2;
        let mut out = vec![0.0; rows * cout * h * w];
        for r in 0..rows {
            for co in 0..cout {
                for y in 0..h {
                    for x0 in 0..w {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for dy in 0..ks {
                                for dx in 0..ks {
                                    let sy = y as isize + dy as isize - pad as isize;
                                    let sx = x0 as isize + dx as isize - pad as isize;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += x[((r * cin + ci) * h + sy as usize) * w + sx as usize]
                                        * k.at(&[co, ci, dy, dx]);
                                }
                            }
                        }
                        out[((r * cout + co) * h + y) * w + x0] = acc;
                    }
                }
            }
        }
        out
    };

    // encoder branches: conv (same padding) -> eval-mode batch norm -> relu
    let mut branches = Vec::with_capacity(n);
    for ni in 0..n {
        let conv = conv_same(inst.x.data(), g(&format!("enc{}.kernel", ni)), c, c);
        let (gamma, beta) = (g(&format!("enc{}.bn.gamma", ni)), g(&format!("enc{}.bn.beta", ni)));
        let (mean, var) = (g(&format!("enc{}.bn.mean", ni)), g(&format!("enc{}.bn.var", ni)));
        let mut m = vec![0.0; conv.len()];
        for r in 0..rows {
            for ci in 0..c {
                for p in 0..h * w {
                    let v = conv[(r * c + ci) * h * w + p];
                    let normed = (v - mean.data()[ci]) / (var.data()[ci] + eps).sqrt()
                        * gamma.data()[ci]
                        + beta.data()[ci];
                    m[(r * c + ci) * h * w + p] = normed.max(0.0);
                }
            }
        }
        branches.push(m);
    }
    let mut merged = vec![0.0; rows * c * h * w];
    for (i, v) in merged.iter_mut().enumerate() {
        *v = branches.iter().map(|m| m[i]).sum::<f64>() / n as f64;
    }

    // shared squeeze-excite decode over a [rows', full] map
    let decode = |map: &[f64], rows_d: usize, full: usize, branch: &str| -> Vec<f64> {
        let red = g(&format!("{}.squeeze.w", branch)).dims()[0];
        let sw = g(&format!("{}.squeeze.w", branch));
        let sb = g(&format!("{}.squeeze.b", branch));
        let mut out = vec![0.0; rows_d * n * full];
        for r in 0..rows_d {
            let hid: Vec<f64> = (0..red)
                .map(|q| {
                    let mut acc = sb.data()[q];
                    for f in 0..full {
                        acc += sw.at(&[q, f, 0, 0]) * map[r * full + f];
                    }
                    acc.max(0.0)
                })
                .collect();
            for f in 0..full {
                let logits: Vec<f64> = (0..n)
                    .map(|ni| {
                        let ew = g(&format!("{}.exc{}.w", branch, ni));
                        let eb = g(&format!("{}.exc{}.b", branch, ni));
                        let mut acc = eb.data()[f];
                        for q in 0..red {
                            acc += ew.at(&[f, q, 0, 0]) * hid[q];
                        }
                        acc
                    })
                    .collect();
                let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - peak).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for ni in 0..n {
                    out[(r * n + ni) * full + f] = exps[ni] / denom;
                }
            }
        }
        out
    };

    // temporal branch: global pool per (t, b), regroup time-major -> per
    // sample, decode over T
    let mut tmap = vec![0.0; b * t];
    for r in 0..rows {
        let mean: f64 = merged[r * c * h * w..(r + 1) * c * h * w].iter().sum::<f64>()
            / (c * h * w) as f64;
        let (ti, bi) = (r / b, r % b);
        tmap[bi * t + ti] = mean;
    }
    let w_alpha = decode(&tmap, b, t, "tmse");

    // channel branch: spatial pool per (row, channel), decode over C
    let mut cmap = vec![0.0; rows * c];
    for r in 0..rows {
        for ci in 0..c {
            cmap[r * c + ci] = merged[(r * c + ci) * h * w..(r * c + ci + 1) * h * w]
                .iter()
                .sum::<f64>()
                / (h * w) as f64;
        }
    }
    let w_beta = decode(&cmap, rows, c, "cmse");

    // recombine
    let mut z = vec![0.0; rows * c * h * w];
    for r in 0..rows {
        let (ti, bi) = (r / b, r % b);
        for ci in 0..c {
            for p in 0..h * w {
                let mut acc = 0.0;
                for (ni, m) in branches.iter().enumerate() {
                    acc += m[(r * c + ci) * h * w + p]
                        * w_alpha[(bi * n + ni) * t + ti]
                        * w_beta[(r * n + ni) * c + ci];
                }
                z[(r * c + ci) * h * w + p] = acc;
            }
        }
    }

    SmaParts {
        branches: branches
            .into_iter()
            .map(|m| Tensor::from_vec(&[rows, c, h, w], m).unwrap())
            .collect(),
        merged: Tensor::from_vec(&[rows, c, h, w], merged).unwrap(),
        w_alpha: Tensor::from_vec(&[b, n, t], w_alpha).unwrap(),
        w_beta: Tensor::from_vec(&[rows, n, c], w_beta).unwrap(),
        z: Tensor::from_vec(&[rows, c, h, w], z).unwrap(),
        batch: b,
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn c03_sma_stages_match_scalar_loops() {
    let started = Instant::now();
    let instances = sma_instances(100);
    let mut worst: f64 = 0.0;
    for inst in &instances {
        let mut g = Graph::new();
        let xv = g.constant(inst.x.clone());
        let mut store = inst.store.clone();
        let mut binds = Bindings::new();
        let parts = inst
            .layer
            .forward_parts(&mut g, &mut store, &mut binds, xv, Mode::Eval)
            .unwrap();
        let reference = sma_scalar_reference(inst);
        for (ni, (got, want)) in parts.branches.iter().zip(&reference.branches).enumerate() {
            let d = max_abs_diff(got, want);
            assert!(d <= 1e-10, "encoder branch {} off by {:.3e}", ni, d);
            worst = worst.max(d);
        }
        for (stage, got, want) in [
            ("merge", &parts.merged, &reference.merged),
            ("t_mse", &parts.w_alpha, &reference.w_alpha),
            ("c_mse", &parts.w_beta, &reference.w_beta),
            ("apply", &parts.z, &reference.z),
        ] {
            let d = max_abs_diff(got, want);
            assert!(d <= 1e-10, "{} off by {:.3e}", stage, d);
            worst = worst.max(d);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        3,
        "SMA stage oracle (encode / t_mse / c_mse / apply vs scalar loops)",
        secs < 120.0,
        &format!("100 instances, max abs diff {:.2e}, {:.1}s", worst, secs),
    );
}

#[test]
fn c04_attention_weights_are_softmax_normalized() {
    let instances = sma_instances(100);
    let mut worst: f64 = 0.0;
    for inst in &instances {
        let mut g = Graph::new();
        let xv = g.constant(inst.x.clone());
        let mut store = inst.store.clone();
        let mut binds = Bindings::new();
        let parts = inst
            .layer
            .forward_parts(&mut g, &mut store, &mut binds, xv, Mode::Eval)
            .unwrap();
        let (t, b, c, n) = (inst.t, inst.b, inst.c, inst.n);
        for bi in 0..b {
            for ti in 0..t {
                let sum: f64 = (0..n).map(|ni| parts.w_alpha.at(&[bi, ni, ti])).sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        for r in 0..t * b {
            for ci in 0..c {
                let sum: f64 = (0..n).map(|ni| parts.w_beta.at(&[r, ni, ci])).sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
    }
    verdict(
        4,
        "scale-axis softmax normalization",
        worst <= 1e-10,
        &format!("both weight families sum to 1 within {:.2e} on 100 instances", worst),
    );
}

// ---------------------------------------------------------------------------
// 05: AZO loop-vs-vectorized equality, invariants, and the worked example

#[test]
fn c05_azo_equivalence_invariants_and_worked_example() {
    let mut rng = derive(55, &[tag("azo")]);
    let mut checked = 0;
    for i in 0..200 {
        let (t, c) = (rng.gen_range(1..=6), rng.gen_range(1..=8));
        let (b, n) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let cfg = AzoConfig {
            rtr: rng.gen_range(1.0..8.0),
            rcr: rng.gen_range(1.0..8.0),
            channel_guard: i % 5 == 0,
            ..AzoConfig::default()
        };
        let w_alpha = rand_tensor(&[b, n, t], 0.0, 1.0, &mut rng);
        let w_beta = rand_tensor(&[t, b, n, c], 0.0, 1.0, &mut rng);
        let z = rand_tensor(&[t * b, c, h, w], -1.0, 1.0, &mut rng);

        assert!(
            loop_vectorized_equal(&z, &w_alpha, &w_beta, &cfg).unwrap(),
            "instance {} diverged",
            i
        );

        let reports = plan(&w_alpha, &w_beta, &cfg).unwrap();
        let (dt, dc) = cfg.deltas(t, c);
        let replaced = apply_loop(&z, &reports, &cfg).unwrap();
        for (bi, report) in reports.iter().enumerate() {
            // cardinality
            if dt > 0 && dc > 0 {
                assert_eq!(report.selected_t.len(), dt);
                for p in &report.selected_c {
                    assert_eq!(p.len(), dc);
                }
            } else {
                assert!(report.selected_t.is_empty());
            }
            // identity off the mask, provenance on it
            for ti in 0..t {
                let sel = report.selected_t.iter().position(|&x| x == ti);
                for ci in 0..c {
                    let on_mask = match sel {
                        Some(k) => {
                            ti != 0
                                && report.selected_c[k].contains(&ci)
                                && !(cfg.channel_guard && ci == 0)
                        }
                        None => false,
                    };
                    let row = ti * b + bi;
                    let src_row = (ti.max(1) - 1) * b + bi;
                    for p in 0..h * w {
                        let got = replaced.data()[(row * c + ci) * h * w + p];
                        let want = if on_mask {
                            z.data()[(src_row * c + ci) * h * w + p]
                        } else {
                            z.data()[(row * c + ci) * h * w + p]
                        };
                        assert_eq!(got, want, "site (b {}, t {}, c {})", bi, ti, ci);
                    }
                }
            }
        }

        // eval transparency: same value, no reports
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let (out, eval_reports) = azo_forward(&mut g, zv, &w_alpha, &w_beta, &cfg, Mode::Eval).unwrap();
        assert_eq!(out, zv);
        assert!(eval_reports.is_empty());
        checked += 1;
    }

    // worked example: T=4, C=4, delta_t = delta_c = 1; the weakest timestep
    // is 2 and its weakest channel is 1, so exactly R[2][1] <- Z[1][1]
    let cfg = AzoConfig { rtr: 4.0, rcr: 4.0, ..AzoConfig::default() };
    let w_alpha = Tensor::from_vec(&[1, 1, 4], vec![0.9, 0.8, 0.1, 0.7]).unwrap();
    let mut wb = vec![0.5; 4 * 1 * 1 * 4];
    wb[2 * 4 + 1] = 0.01; // t=2, c=1
    let w_beta = Tensor::from_vec(&[4, 1, 1, 4], wb).unwrap();
    let z = Tensor::from_vec(&[4, 4, 1, 1], (0..16).map(|v| v as f64).collect()).unwrap();
    let reports = plan(&w_alpha, &w_beta, &cfg).unwrap();
    assert_eq!(reports[0].selected_t, vec![2]);
    assert_eq!(reports[0].selected_c, vec![vec![1]]);
    let r = apply_loop(&z, &reports, &cfg).unwrap();
    let mut want = z.data().to_vec();
    want[2 * 4 + 1] = z.data()[1 * 4 + 1];
    assert_eq!(r.data(), &want[..]);

    // guard: when the weakest timestep is 0 nothing is replaced
    let w_alpha0 = Tensor::from_vec(&[1, 1, 4], vec![0.1, 0.8, 0.9, 0.7]).unwrap();
    let reports0 = plan(&w_alpha0, &w_beta, &cfg).unwrap();
    assert_eq!(reports0[0].selected_t, vec![0]);
    assert_eq!(reports0[0].replaced_sites, 0);
    let r0 = apply_loop(&z, &reports0, &cfg).unwrap();
    assert_eq!(r0.data(), z.data());

    verdict(
        5,
        "AZO equivalence + invariants + worked example",
        checked == 200,
        &format!("{} random instances bitwise equal, invariants hold, hand case exact", checked),
    );
}

// ---------------------------------------------------------------------------
// 06: event binning boundaries and conservation

#[test]
fn c06_event_binning_boundaries_and_conservation() {
    assert_eq!(slice_bounds(10, 3), vec![(0, 3), (3, 6), (6, 10)]);

    let mut rng = derive(66, &[tag("binning")]);
    let mut streams = 0;
    for _ in 0..1000 {
        let (w, h) = (rng.gen_range(2..=16u16), rng.gen_range(2..=16u16));
        let t = rng.gen_range(1..=8usize);
        let count = rng.gen_range(t..=200);
        let events: Vec<Event> = (0..count)
            .map(|_| Event {
                x: rng.gen_range(0..w),
                y: rng.gen_range(0..h),
                p: rng.gen_range(0..2u8),
            })
            .collect();
        let stream = EventStream { width: w, height: h, label: 0, events };
        let frames = bin_events(&stream, t).unwrap();
        let mass: f64 = frames.data().iter().sum();
        assert_eq!(mass, count as f64, "lost events at T = {}", t);
        streams += 1;
    }
    verdict(
        6,
        "event binning (N=10/T=3 boundaries + conservation)",
        streams == 1000,
        &format!("boundaries exact, frame mass preserved on {} random streams", streams),
    );
}

// ---------------------------------------------------------------------------
// 07: decoder parameter accounting

/// Count scalars of registered decoder tensors by branch and kind.
fn measured_decoder_counts(store: &ParamStore) -> (usize, usize) {
    let mut weights = 0;
    let mut biases = 0;
    for (name, entry) in store.iter() {
        if !(name.contains(".tmse.") || name.contains(".cmse.")) {
            continue;
        }
        if name.ends_with(".w") {
            weights += entry.tensor.numel();
        } else if name.ends_with(".b") {
            biases += entry.tensor.numel();
        }
    }
    (weights, biases)
}

#[test]
fn c07_decoder_parameter_counts_match_the_closed_form() {
    let settings = [
        (4usize, 8usize, 2usize, 4usize, 2usize),
        (8, 16, 4, 4, 4),
        (6, 12, 3, 4, 3),
        (8, 32, 4, 8, 4),
        (4, 4, 2, 2, 2),
    ];
    for &(t, c, tr, cr, n) in &settings {
        let cfg = SmaConfig {
            scales: n,
            kernel_sizes: (0..n).map(|k| 2 * k + 1).collect(),
            channel_reduction: cr,
            time_reduction: tr,
            encoder_act: EncoderAct::Relu,
        };
        let layer = SmaLayer::new("a", cfg.clone(), t, c).unwrap();
        let mut store = ParamStore::new();
        layer.init(&mut store, 0).unwrap();
        let (mw, mb) = measured_decoder_counts(&store);
        let (fw, fb) = decoder_param_counts(t, c, &cfg);
        assert_eq!((mw, mb), (fw, fb), "setting (T={}, C={}, TR={}, CR={}, N={})", t, c, tr, cr, n);
    }

    // quadrupling C multiplies the channel-branch weight count by 16
    let cmse_weights = |c: usize| -> usize {
        let cfg = SmaConfig {
            scales: 3,
            kernel_sizes: vec![1, 3, 5],
            channel_reduction: 4,
            time_reduction: 2,
            encoder_act: EncoderAct::Relu,
        };
        let layer = SmaLayer::new("a", cfg, 4, c).unwrap();
        let mut store = ParamStore::new();
        layer.init(&mut store, 0).unwrap();
        store
            .iter()
            .filter(|(n, _)| n.contains(".cmse.") && n.ends_with(".w"))
            .map(|(_, e)| e.tensor.numel())
            .sum()
    };
    let (small, big) = (cmse_weights(8), cmse_weights(32));
    assert_eq!(big, 16 * small, "c_mse weights {} -> {}", small, big);

    verdict(
        7,
        "decoder parameter accounting",
        true,
        &format!(
            "5 settings match the closed form; 4x channels -> exactly 16x c_mse weights ({} -> {})",
            small, big
        ),
    );
}

// ---------------------------------------------------------------------------
// 08: end-to-end learning on the 4-class gesture set

fn gesture_dataset(
    classes: usize,
    per_class: usize,
    side: u16,
    events: usize,
    t: usize,
    ratio: f64,
    seed: u64,
) -> (Vec<Sample>, Vec<Sample>) {
    let streams = synth_gestures(&SynthConfig {
        classes,
        samples_per_class: per_class,
        width: side,
        height: side,
        events_per_sample: events,
        noise_rate: 0.05,
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

/// The fixed end-to-end setup: 4 classes, 200 train / 40 test at 32x32,
/// T=8, and a three-block SMA-VGG with attention on every non-coding
/// block. Expressed as one experiment config so the in-process run and the
/// spawned command-line runs draw the identical dataset and model.
fn end_to_end_experiment() -> ExperimentConfig {
    let mut cfg = ModelConfig::desk_vgg(8, 4, 32, 32);
    cfg.placement = "T3+L1".into();
    ExperimentConfig {
        seed: 77,
        epochs: 50,
        batch_size: 20,
        timesteps: None,
        early_stop: Some(0.9),
        data: DataConfig::Synth {
            classes: 4,
            per_class: 60,
            width: 32,
            height: 32,
            events: 1200,
            noise: 0.05,
            train_ratio: 5.0 / 6.0,
            data_seed: Some(2024),
        },
        loss: LossKind::RateMse,
        optim: OptimSpec::adam(1e-3),
        model_path: None,
        model: Some(cfg),
    }
}

#[test]
fn c08_end_to_end_learning_reaches_90_percent() {
    let started = Instant::now();
    let exp = end_to_end_experiment();
    let cfg = exp.resolve_model(std::path::Path::new(".")).unwrap();
    let (train_set, test_set) = load_samples(&exp, std::path::Path::new("."), 8).unwrap();
    assert_eq!((train_set.len(), test_set.len()), (200, 40));
    let tc = TrainConfig {
        epochs: exp.epochs,
        start_epoch: 0,
        batch_size: exp.batch_size,
        loss: exp.loss,
        seed: exp.seed,
        early_stop: exp.early_stop,
    };
    let mut model = Model::build(cfg, tc.seed).unwrap();
    let mut opt = Optimizer::new(exp.optim).unwrap();
    let outcome = train(&mut model, &mut opt, &train_set, &test_set, &tc, None).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let epochs_run = outcome.history.len() / 2;
    verdict(
        8,
        "end-to-end learning (4-class gestures, SMA-VGG T3+L1)",
        outcome.best_accuracy >= 0.90 && epochs_run <= 50 && secs <= 900.0,
        &format!(
            "test accuracy {:.3} at epoch {} ({} epochs run), {:.0}s",
            outcome.best_accuracy, outcome.best_epoch, epochs_run, secs
        ),
    );
}

// ---------------------------------------------------------------------------
// 09: directional effects of SMA and AZO over three seeds

struct SeedRun {
    test_acc: f64,
    gap: f64,
    eval_spikes: f64,
}

fn run_variant(cfg: &ModelConfig, train_set: &[Sample], test_set: &[Sample], seed: u64) -> SeedRun {
    let tc = TrainConfig {
        epochs: 12,
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

#[test]
fn c09_directional_effects_over_three_seeds() {
    let (train_set, test_set) = gesture_dataset(4, 30, 16, 500, 4, 0.75, 515);

    let mut base = ModelConfig::desk_vgg(4, 4, 16, 16);
    base.blocks.truncate(2);
    base.blocks[0].width = 8;
    base.blocks[1].width = 16;
    base.head.hidden = Some(64);
    base.sma.scales = 2;
    base.sma.kernels = vec![1, 3];
    base.sma.cr = 4;
    base.sma.tr = Some(2);

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
        sma.push(run_variant(&with_sma, &train_set, &test_set, seed));
        plain.push(run_variant(&without_sma, &train_set, &test_set, seed));
        azo.push(run_variant(&with_azo, &train_set, &test_set, seed));
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
    verdict(
        9,
        "directional effects (3-seed means, 2% slack)",
        a && b && c,
        &format!(
            "accuracy SMA {:.3} vs none {:.3} [{}]; train-test gap AZO {:.3} vs none {:.3} [{}]; eval spikes SMA {:.0} vs none {:.0} [{}]",
            acc_sma,
            acc_plain,
            if a { "ok" } else { "regression" },
            gap_azo,
            gap_sma,
            if b { "ok" } else { "regression" },
            spikes_sma,
            spikes_plain,
            if c { "ok" } else { "regression" },
        ),
    );
}

// ---------------------------------------------------------------------------
// 10: byte-identical metrics from two single-threaded runs

#[test]
fn c10_single_threaded_runs_are_byte_identical() {
    // the same experiment as the end-to-end check, executed twice through
    // the command-line binary in fresh single-threaded processes
    let dir = tempfile::tempdir().unwrap();
    let exp = end_to_end_experiment();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(&cfg_path, exp.to_toml_string().unwrap()).unwrap();

    let bin = env!("CARGO_BIN_EXE_sma-snn");
    let run = |out: &str| {
        let status = std::process::Command::new(bin)
            .args([
                "train",
                "--config",
                cfg_path.to_str().unwrap(),
                "--out",
                dir.path().join(out).to_str().unwrap(),
            ])
            .env("SMA_SNN_THREADS", "1")
            .status()
            .unwrap();
        assert!(status.success(), "training run {} failed", out);
        std::fs::read(dir.path().join(out).join("metrics.csv")).unwrap()
    };
    let first = run("a");
    let second = run("b");
    let rows = first.iter().filter(|&&b| b == b'\n').count();
    verdict(
        10,
        "reproducibility (two single-threaded runs)",
        first == second,
        &format!("metrics.csv byte-identical across runs ({} lines)", rows),
    );
}
