//! Losses, optimizers, the training loop, and evaluation.
//!
//! Batches are time-major: B samples of `[T, C, H, W]` stack into
//! `[T*B, C, H, W]` with row `t*B + b` holding sample b's frame t, the
//! layout every layer expects. The readout is the rate over timesteps of
//! the final affine's real-valued outputs; no neuron sits on the output
//! layer, so losses stay well-scaled.
//!
//! Determinism: every epoch draws its shuffle, dropout, and AZO randomness
//! from an rng derived as (seed, epoch), so epoch k's trajectory does not
//! depend on how many epochs ran before it. That makes checkpoint resume
//! bit-exact and lets two identical single-threaded runs produce
//! byte-equal metric logs.
//!
//! Checkpoints reuse the parameter container: model entries plus optimizer
//! slots under an `opt.` prefix, with the model config, epoch and best
//! metric in the metadata block.

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Value};
use crate::model::{Forward, Model, SpikeStat, CONFIG_META_KEY};
use crate::params::{read_store, write_store, ParamStore};
use crate::rng::{derive, tag};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::path::Path;

// ---------------------------------------------------------------------------
// losses

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    /// Mean squared error between the timestep-mean readout and a one-hot
    /// target.
    #[serde(rename = "rate-mse")]
    RateMse,
    /// Cross-entropy applied at every timestep, averaged over T and batch.
    #[serde(rename = "timestep-ce")]
    TimestepCe,
    /// Timestep cross-entropy against targets mixed with the uniform
    /// distribution by epsilon.
    #[serde(rename = "label-smooth-ce")]
    LabelSmoothCe { epsilon: f64 },
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        if let LossKind::LabelSmoothCe { epsilon } = self {
            if !(0.0..0.5).contains(epsilon) {
                return Err(Error::Config(format!(
                    "label smoothing must lie in [0, 0.5), got {}",
                    epsilon
                )));
            }
        }
        Ok(())
    }
}

/// `[B, K]` target rows: 1 - eps at the label, eps/K spread everywhere.
fn smoothed_targets(labels: &[usize], k: usize, eps: f64) -> Result<Tensor> {
    let b = labels.len();
    let mut data = vec![eps / k as f64; b * k];
    for (bi, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Config(format!(
                "label {} out of range for {} classes",
                l, k
            )));
        }
        data[bi * k + l] += 1.0 - eps;
    }
    Tensor::from_vec(&[b, k], data)
}

/// Repeat `[B, K]` targets for every timestep: row `t*B + b` = base row b.
fn repeat_over_time(base: &Tensor, t: usize) -> Result<Tensor> {
    let (b, k) = (base.dims()[0], base.dims()[1]);
    let mut data = Vec::with_capacity(t * b * k);
    for _ in 0..t {
        data.extend_from_slice(base.data());
    }
    Tensor::from_vec(&[t * b, k], data)
}

/// Build the training loss from `[T*B, K]` logits. Labels are per sample.
pub fn loss_value(
    g: &mut Graph,
    logits: Value,
    labels: &[usize],
    timesteps: usize,
    kind: LossKind,
) -> Result<Value> {
    kind.validate()?;
    let d = g.value(logits).dims().to_vec();
    if d.len() != 2 || timesteps == 0 || d[0] % timesteps != 0 {
        return Err(Error::Shape(format!(
            "loss expects [T*B, K] logits with T = {}, got {}",
            timesteps,
            g.value(logits).shape()
        )));
    }
    let b = d[0] / timesteps;
    let k = d[1];
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            b
        )));
    }
    match kind {
        LossKind::RateMse => {
            let r3 = g.reshape(logits, &[timesteps, b, k])?;
            let rate = g.mean_axes(r3, &[0], false)?;
            let target = g.constant(smoothed_targets(labels, k, 0.0)?);
            let diff = g.sub(rate, target)?;
            let sq = g.mul(diff, diff)?;
            g.mean_all(sq)
        }
        LossKind::TimestepCe | LossKind::LabelSmoothCe { .. } => {
            let eps = match kind {
                LossKind::LabelSmoothCe { epsilon } => epsilon,
                _ => 0.0,
            };
            let base = smoothed_targets(labels, k, eps)?;
            let target = g.constant(repeat_over_time(&base, timesteps)?);
            let ls = g.log_softmax(logits, 1)?;
            let prod = g.mul(ls, target)?;
            let total = g.sum_all(prod)?;
            Ok(g.scale(total, -1.0 / (timesteps * b) as f64))
        }
    }
}

/// Timestep-mean readout `[B, K]` and argmax predictions (ties resolve to
/// the lowest class index).
pub fn rate_readout(logits: &Tensor, timesteps: usize) -> Result<(Tensor, Vec<usize>)> {
    let d = logits.dims();
    if d.len() != 2 || timesteps == 0 || d[0] % timesteps != 0 {
        return Err(Error::Shape(format!(
            "readout expects [T*B, K] logits, got {}",
            logits.shape()
        )));
    }
    let b = d[0] / timesteps;
    let k = d[1];
    let src = logits.data();
    let mut rates = vec![0.0; b * k];
    for t in 0..timesteps {
        for bi in 0..b {
            for ki in 0..k {
                rates[bi * k + ki] += src[(t * b + bi) * k + ki];
            }
        }
    }
    for r in &mut rates {
        *r /= timesteps as f64;
    }
    let preds = (0..b)
        .map(|bi| {
            let row = &rates[bi * k..(bi + 1) * k];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    Ok((Tensor::from_vec(&[b, k], rates)?, preds))
}

// ---------------------------------------------------------------------------
// optimizers

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimKind {
    #[serde(rename = "sgd")]
    Sgd { momentum: f64, weight_decay: f64 },
    #[serde(rename = "adam")]
    Adam { beta1: f64, beta2: f64 },
    #[serde(rename = "adamw")]
    AdamW {
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    #[serde(rename = "constant")]
    Constant,
    #[serde(rename = "cosine")]
    Cosine { total_epochs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimSpec {
    pub kind: OptimKind,
    pub lr: f64,
    pub schedule: Schedule,
}

impl OptimSpec {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> OptimSpec {
        OptimSpec {
            kind: OptimKind::Sgd {
                momentum,
                weight_decay,
            },
            lr,
            schedule: Schedule::Constant,
        }
    }

    pub fn adam(lr: f64) -> OptimSpec {
        OptimSpec {
            kind: OptimKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
            },
            lr,
            schedule: Schedule::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if let Schedule::Cosine { total_epochs } = self.schedule {
            if total_epochs == 0 {
                return Err(Error::Config("cosine schedule needs total_epochs >= 1".into()));
            }
        }
        match self.kind {
            OptimKind::Sgd { momentum, .. } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Config(format!(
                        "momentum must lie in [0, 1), got {}",
                        momentum
                    )));
                }
            }
            OptimKind::Adam { beta1, beta2 } | OptimKind::AdamW { beta1, beta2, .. } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::Config(format!(
                        "Adam betas must lie in [0, 1), got ({}, {})",
                        beta1, beta2
                    )));
                }
            }
        }
        Ok(())
    }

    /// Learning rate at a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine { total_epochs } => {
                let ratio = epoch as f64 / total_epochs as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * ratio).cos())
            }
        }
    }
}

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Slot {
    /// SGD velocity, or Adam first moment.
    m: Tensor,
    /// Adam second moment (unused for SGD).
    v: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub spec: OptimSpec,
    step_count: u64,
    slots: IndexMap<String, Slot>,
}

impl Optimizer {
    pub fn new(spec: OptimSpec) -> Result<Optimizer> {
        spec.validate()?;
        Ok(Optimizer {
            spec,
            step_count: 0,
            slots: IndexMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every (name, grad) pair. Gradients must belong to
    /// trainable entries of `store`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &IndexMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        for (name, grad) in grads {
            let entry = store.entry(name)?;
            if !entry.trainable {
                return Err(Error::Config(format!(
                    "gradient supplied for frozen entry {:?}",
                    name
                )));
            }
            if entry.tensor.dims() != grad.dims() {
                return Err(Error::Shape(format!(
                    "gradient shape {} does not match {:?} with {}",
                    grad.shape(),
                    name,
                    entry.tensor.shape()
                )));
            }
            let p = entry.tensor.data().to_vec();
            let gd = grad.data();
            let dims = entry.tensor.dims().to_vec();
            let updated = match self.spec.kind {
                OptimKind::Sgd {
                    momentum,
                    weight_decay,
                } => {
                    let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                        m: Tensor::zeros(&dims),
                        v: None,
                    });
                    let mut vel = slot.m.data().to_vec();
                    let mut out = p;
                    for i in 0..out.len() {
                        let g_eff = gd[i] + weight_decay * out[i];
                        vel[i] = momentum * vel[i] + g_eff;
                        out[i] -= lr * vel[i];
                    }
                    slot.m = Tensor::from_vec(&dims, vel)?;
                    Tensor::from_vec(&dims, out)?
                }
                OptimKind::Adam { beta1, beta2 }
                | OptimKind::AdamW { beta1, beta2, .. } => {
                    let weight_decay = match self.spec.kind {
                        OptimKind::AdamW { weight_decay, .. } => weight_decay,
                        _ => 0.0,
                    };
                    let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                        m: Tensor::zeros(&dims),
                        v: Some(Tensor::zeros(&dims)),
                    });
                    let mut m = slot.m.data().to_vec();
                    let mut v = slot.v.as_ref().expect("adam slot").data().to_vec();
                    let mut out = p;
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    for i in 0..out.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gd[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gd[i] * gd[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        // decoupled decay shrinks the weight before the
                        // adaptive step
                        out[i] -= lr * weight_decay * out[i];
                        out[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                    slot.m = Tensor::from_vec(&dims, m)?;
                    slot.v = Some(Tensor::from_vec(&dims, v)?);
                    Tensor::from_vec(&dims, out)?
                }
            };
            store.set(name, updated)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// batches

/// Stack per-sample `[T, ...]` tensors into one `[T*B, ...]` batch with the
/// time index outermost: output row `t*B + b` is sample b's slice t.
pub fn stack_time_major(samples: &[&Tensor]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("cannot stack an empty batch".into()))?;
    let dims = first.dims().to_vec();
    let b = samples.len();
    let t = dims[0];
    let frame: usize = dims[1..].iter().product();
    let mut out = vec![0.0; t * b * frame];
    for (bi, s) in samples.iter().enumerate() {
        if s.dims() != dims {
            return Err(Error::Shape(format!(
                "batch sample {} has shape {}, expected {}",
                bi,
                s.shape(),
                first.shape()
            )));
        }
        for ti in 0..t {
            let dst = ((ti * b) + bi) * frame;
            out[dst..dst + frame].copy_from_slice(&s.data()[ti * frame..(ti + 1) * frame]);
        }
    }
    let mut out_dims = dims;
    out_dims[0] = t * b;
    Tensor::from_vec(&out_dims, out)
}

/// A binned, labeled sample: frames `[T, C, H, W]` plus its class.
pub type Sample = (Tensor, usize);

// ---------------------------------------------------------------------------
// evaluation

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Mean spiking firing rate per LIF layer, unit order.
    pub sfr: Vec<(String, f64)>,
    /// Total spikes per LIF layer over the whole set.
    pub spike_counts: Vec<(String, f64)>,
    /// Membrane sites per LIF layer over the whole set (the SFR denominator).
    pub spike_sites: Vec<(String, f64)>,
}

fn merge_spikes(acc: &mut IndexMap<String, (f64, f64)>, stats: &[SpikeStat]) {
    for s in stats {
        let e = acc.entry(s.path.clone()).or_insert((0.0, 0.0));
        e.0 += s.count;
        e.1 += s.sites;
    }
}

type SpikeSummary = (Vec<(String, f64)>, Vec<(String, f64)>, Vec<(String, f64)>);

fn spike_summaries(acc: &IndexMap<String, (f64, f64)>) -> SpikeSummary {
    let sfr = acc
        .iter()
        .map(|(k, (c, s))| (k.clone(), if *s > 0.0 { c / s } else { 0.0 }))
        .collect();
    let counts = acc.iter().map(|(k, (c, _))| (k.clone(), *c)).collect();
    let sites = acc.iter().map(|(k, (_, s))| (k.clone(), *s)).collect();
    (sfr, counts, sites)
}

/// Eval-mode pass over a dataset: accuracy by rate readout, mean SFR and
/// total spikes per layer. AZO is inert and batch norm uses running stats.
pub fn evaluate(
    model: &mut Model,
    samples: &[Sample],
    batch_size: usize,
    loss_kind: LossKind,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let t = model.timesteps();
    let mut rng = derive(0, &[tag("eval")]);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut acc = IndexMap::new();
    for chunk in samples.chunks(batch_size) {
        let frames: Vec<&Tensor> = chunk.iter().map(|(f, _)| f).collect();
        let labels: Vec<usize> = chunk.iter().map(|(_, l)| *l).collect();
        let x = stack_time_major(&frames)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let fwd = model.forward(&mut g, xv, Mode::Eval, &mut rng)?;
        let lv = loss_value(&mut g, fwd.logits, &labels, t, loss_kind)?;
        loss_sum += g.value(lv).data()[0] * chunk.len() as f64;
        let (_, preds) = rate_readout(g.value(fwd.logits), t)?;
        correct += preds
            .iter()
            .zip(&labels)
            .filter(|(p, l)| *p == *l)
            .count();
        merge_spikes(&mut acc, &fwd.spikes);
    }
    let (sfr, spike_counts, spike_sites) = spike_summaries(&acc);
    Ok(EvalReport {
        loss: loss_sum / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
        correct,
        total: samples.len(),
        sfr,
        spike_counts,
        spike_sites,
    })
}

// ---------------------------------------------------------------------------
// the training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total epochs (the loop runs `start_epoch..epochs`).
    pub epochs: usize,
    /// First 0-based epoch index to run; nonzero when resuming.
    #[serde(default)]
    pub start_epoch: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Stop once test accuracy reaches this, after logging the epoch.
    #[serde(default)]
    pub early_stop: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.start_epoch > self.epochs {
            return Err(Error::Config(format!(
                "start epoch {} lies beyond total epochs {}",
                self.start_epoch, self.epochs
            )));
        }
        self.loss.validate()
    }
}

/// One CSV row of the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// "train" or "test".
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub sfr: Vec<(String, f64)>,
}

/// Header plus one line per entry; floats print in shortest round-trip
/// form so identical runs emit identical bytes.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,loss,accuracy");
    if let Some(first) = history.first() {
        for (path, _) in &first.sfr {
            out.push_str(&format!(",sfr_{}", path));
        }
    }
    out.push('\n');
    for m in history {
        out.push_str(&format!("{},{},{},{}", m.epoch, m.split, m.loss, m.accuracy));
        for (_, v) in &m.sfr {
            out.push_str(&format!(",{}", v));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    /// Best test accuracy seen and its 1-based epoch (first epoch wins
    /// ties); zero epoch when no epoch ran.
    pub best_accuracy: f64,
    pub best_epoch: usize,
}

fn collect_grads(g: &Graph, store: &ParamStore, fwd: &Forward) -> Result<IndexMap<String, Tensor>> {
    let mut grads = IndexMap::new();
    for (name, v) in fwd.binds.iter() {
        if store.entry(name)?.trainable {
            if let Some(grad) = g.grad(v) {
                grads.insert(name.to_string(), grad);
            }
        }
    }
    Ok(grads)
}

/// Run `cfg.start_epoch..cfg.epochs` of shuffled minibatch training. Writes
/// `last.snnp` / `best.snnp` checkpoints and `metrics.csv` into `out_dir`
/// when given. A non-finite loss aborts, naming the epoch and batch.
pub fn train(
    model: &mut Model,
    opt: &mut Optimizer,
    train_set: &[Sample],
    test_set: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Config("train and test sets must be non-empty".into()));
    }
    let t = model.timesteps();
    let mut history = Vec::new();
    let mut best_accuracy = 0.0;
    let mut best_epoch = 0;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for epoch in cfg.start_epoch..cfg.epochs {
        let mut rng = derive(cfg.seed, &[tag("epoch"), epoch as u64]);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        crate::events::shuffle(&mut order, &mut rng);
        let lr = opt.spec.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut acc = IndexMap::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let frames: Vec<&Tensor> = chunk.iter().map(|&i| &train_set[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set[i].1).collect();
            let x = stack_time_major(&frames)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let fwd = model.forward(&mut g, xv, Mode::Train, &mut rng)?;
            let lv = loss_value(&mut g, fwd.logits, &labels, t, cfg.loss)?;
            let loss = g.value(lv).data()[0];
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} in epoch {}, batch {}",
                    loss,
                    epoch + 1,
                    bi
                )));
            }
            g.backward(lv)?;
            let grads = collect_grads(&g, &model.store, &fwd)?;
            opt.step(&mut model.store, &grads, lr)?;
            loss_sum += loss * chunk.len() as f64;
            let (_, preds) = rate_readout(g.value(fwd.logits), t)?;
            correct += preds
                .iter()
                .zip(&labels)
                .filter(|(p, l)| *p == *l)
                .count();
            merge_spikes(&mut acc, &fwd.spikes);
        }
        let (train_sfr, _) = spike_summaries(&acc);
        history.push(EpochMetrics {
            epoch: epoch + 1,
            split: "train".into(),
            loss: loss_sum / train_set.len() as f64,
            accuracy: correct as f64 / train_set.len() as f64,
            sfr: train_sfr,
        });
        let report = evaluate(model, test_set, cfg.batch_size, cfg.loss)?;
        history.push(EpochMetrics {
            epoch: epoch + 1,
            split: "test".into(),
            loss: report.loss,
            accuracy: report.accuracy,
            sfr: report.sfr.clone(),
        });
        let improved = report.accuracy > best_accuracy || best_epoch == 0;
        if improved {
            best_accuracy = report.accuracy;
            best_epoch = epoch + 1;
        }
        if let Some(dir) = out_dir {
            let mut meta = IndexMap::new();
            meta.insert("epoch".into(), (epoch + 1).to_string());
            meta.insert("seed".into(), cfg.seed.to_string());
            meta.insert("best-accuracy".into(), best_accuracy.to_string());
            meta.insert("best-epoch".into(), best_epoch.to_string());
            save_checkpoint(&dir.join("last.snnp"), model, opt, &meta)?;
            if improved {
                save_checkpoint(&dir.join("best.snnp"), model, opt, &meta)?;
            }
            std::fs::write(dir.join("metrics.csv"), metrics_csv(&history))
                .map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
        }
        if let Some(stop) = cfg.early_stop {
            if report.accuracy >= stop {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        history,
        best_accuracy,
        best_epoch,
    })
}

// ---------------------------------------------------------------------------
// checkpoints

const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

/// Model parameters, optimizer slots and metadata in one container.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    opt: &Optimizer,
    extra_meta: &IndexMap<String, String>,
) -> Result<()> {
    let mut combined = model.store.clone();
    for (name, slot) in &opt.slots {
        combined.insert(&format!("{}{}", OPT_M, name), slot.m.clone(), false)?;
        if let Some(v) = &slot.v {
            combined.insert(&format!("{}{}", OPT_V, name), v.clone(), false)?;
        }
    }
    let mut meta = IndexMap::new();
    meta.insert(CONFIG_META_KEY.to_string(), model.config.to_toml_string()?);
    meta.insert(
        "optim-spec".to_string(),
        toml::to_string(&opt.spec).map_err(|e| Error::Config(format!("optim spec: {}", e)))?,
    );
    meta.insert("opt-step".to_string(), opt.step_count.to_string());
    for (k, v) in extra_meta {
        meta.insert(k.clone(), v.clone());
    }
    write_store(path, &combined, &meta)
}

/// Rebuild model and optimizer from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Optimizer, IndexMap<String, String>)> {
    let (combined, meta) = read_store(path)?;
    let cfg_text = meta
        .get(CONFIG_META_KEY)
        .ok_or_else(|| Error::format(path, format!("missing {:?} metadata entry", CONFIG_META_KEY)))?;
    let config = crate::model::config::ModelConfig::from_toml_str(cfg_text)?;
    let mut model = Model::build(config, 0)?;
    let spec_text = meta
        .get("optim-spec")
        .ok_or_else(|| Error::format(path, "missing \"optim-spec\" metadata entry"))?;
    let spec: OptimSpec =
        toml::from_str(spec_text).map_err(|e| Error::Config(format!("optim spec: {}", e)))?;
    let mut opt = Optimizer::new(spec)?;
    opt.step_count = meta
        .get("opt-step")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let mut params = ParamStore::new();
    for (name, entry) in combined.iter() {
        if let Some(base) = name.strip_prefix(OPT_M) {
            let slot = opt.slots.entry(base.to_string()).or_insert_with(|| Slot {
                m: Tensor::zeros(entry.tensor.dims()),
                v: None,
            });
            slot.m = entry.tensor.clone();
        } else if let Some(base) = name.strip_prefix(OPT_V) {
            let slot = opt.slots.entry(base.to_string()).or_insert_with(|| Slot {
                m: Tensor::zeros(entry.tensor.dims()),
                v: None,
            });
            slot.v = Some(entry.tensor.clone());
        } else {
            params.insert(name, entry.tensor.clone(), entry.trainable)?;
        }
    }
    model.store.adopt(params)?;
    Ok((model, opt, meta))
}
