//! Network builders: SMA-VGG, MS-ResNet, placement policies, and model
//! persistence.
//!
//! A model is a flat unit list built from a declarative config. VGG conv
//! blocks read `LIF -> Conv -> BN -> MaxPool(2)` with the encoding (first)
//! block dropping the leading LIF since raw frames are the input current;
//! an SMA layer slots after the conv (L1) or after the neuron (L3) in
//! blocks chosen by the placement tier. The head flattens, applies an
//! affine to a hidden width, dropout, a LIF, and the class affine; logits
//! are real-valued per timestep.
//!
//! MS-ResNet: a Conv-BN stem (the encoding block), then stages. Each stage
//! for index 2+ opens with a stride-2 transition (LIF -> Conv -> BN) that
//! changes width, then an optional SMA at the stage width, then
//! membrane-shortcut residual blocks: two LIF -> Conv -> BN legs with the
//! identity added after the batch-norm stack, so activations sit before
//! the addition. Shape-changing blocks get a 1x1 Conv-BN shortcut. The
//! head is LIF -> global average pool -> affine.
//!
//! Placement tiers count 1-based over the full block list (conv blocks or
//! stem+stages, then head affine blocks) with the encoding block first;
//! see the config module for the exact sets. Activations flow as
//! `[T*B, C, H, W]` with time outermost.

pub mod config;

use crate::azo::{azo_forward, AzoConfig, AzoReport};
use crate::error::{Error, Result};
use crate::graph::{BnCfg, Graph, Mode, Value};
use crate::neuron::{lif_sequence, NeuronConfig, SpikeMode};
use crate::params::{
    apply_batch_norm, kaiming_uniform, param_rng, read_store, register_batch_norm, write_store,
    Bindings, ParamStore,
};
use crate::rng::SeededRng;
use crate::sma::{SmaLayer, SmaTrace};
use crate::tensor::Tensor;
use config::{ModelConfig, ModelKind, SmaPosition};
use indexmap::IndexMap;
use std::collections::BTreeSet;
use std::path::Path;

pub const CONFIG_META_KEY: &str = "model-config";

#[derive(Debug, Clone)]
enum Unit {
    Lif { path: String, cfg: NeuronConfig },
    Conv { path: String, stride: usize, pad: usize },
    Bn { path: String },
    Sma { layer: SmaLayer, azo: Option<AzoConfig> },
    MaxPool,
    Flatten,
    Affine { path: String },
    Dropout { p: f64 },
    GlobalAvgPool,
    Residual { body: Vec<Unit>, shortcut: Vec<Unit> },
}

/// Firing statistics of one LIF layer in one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeStat {
    pub path: String,
    /// Total spikes emitted.
    pub count: f64,
    /// Sites that could have spiked (neurons x timesteps x batch).
    pub sites: f64,
}

impl SpikeStat {
    /// Mean spiking firing rate: spikes per site per step, in [0, 1].
    pub fn rate(&self) -> f64 {
        if self.sites > 0.0 {
            self.count / self.sites
        } else {
            0.0
        }
    }
}

/// Everything one forward pass produced.
pub struct Forward {
    /// `[T*B, classes]`, time outermost.
    pub logits: Value,
    pub binds: Bindings,
    pub traces: Vec<(String, SmaTrace)>,
    pub azo_reports: Vec<(String, Vec<AzoReport>)>,
    pub spikes: Vec<SpikeStat>,
    /// Spike tensors of explicitly captured LIF layers.
    pub captured: Vec<(String, Tensor)>,
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    units: Vec<Unit>,
    /// 1-based block indices that carry SMA (over the placement block
    /// list).
    sma_blocks: BTreeSet<usize>,
}

struct FwCtx<'a> {
    mode: Mode,
    rng: &'a mut SeededRng,
    capture: &'a [String],
    traces: Vec<(String, SmaTrace)>,
    reports: Vec<(String, Vec<AzoReport>)>,
    spikes: Vec<SpikeStat>,
    captured: Vec<(String, Tensor)>,
}

fn run_units(
    g: &mut Graph,
    store: &mut ParamStore,
    binds: &mut Bindings,
    units: &[Unit],
    mut x: Value,
    timesteps: usize,
    ctx: &mut FwCtx,
) -> Result<Value> {
    for unit in units {
        x = match unit {
            Unit::Lif { path, cfg } => {
                let spikes = lif_sequence(g, cfg, x, timesteps, SpikeMode::Binary)?;
                let t = g.value(spikes);
                ctx.spikes.push(SpikeStat {
                    path: path.clone(),
                    count: t.sum(),
                    sites: t.numel() as f64,
                });
                if ctx.capture.iter().any(|c| c == path) {
                    ctx.captured.push((path.clone(), t.clone()));
                }
                spikes
            }
            Unit::Conv { path, stride, pad } => {
                let k = binds.bind(g, store, &format!("{}.kernel", path))?;
                g.conv2d(x, k, None, *stride, *pad)?
            }
            Unit::Bn { path } => {
                apply_batch_norm(g, store, binds, path, x, BnCfg::default(), ctx.mode)?
            }
            Unit::Sma { layer, azo } => {
                let (z, trace) = layer.forward_traced(g, store, binds, x, ctx.mode)?;
                let out = match (azo, ctx.mode) {
                    (Some(cfg), Mode::Train) => {
                        let (r, reports) =
                            azo_forward(g, z, &trace.w_alpha, &trace.w_beta, cfg, ctx.mode)?;
                        ctx.reports.push((layer.prefix.clone(), reports));
                        r
                    }
                    _ => z,
                };
                ctx.traces.push((layer.prefix.clone(), trace));
                out
            }
            Unit::MaxPool => g.max_pool(x, 2, 2, 0)?,
            Unit::Flatten => {
                let d = g.value(x).dims().to_vec();
                let flat: usize = d[1..].iter().product();
                g.reshape(x, &[d[0], flat])?
            }
            Unit::Affine { path } => {
                let w = binds.bind(g, store, &format!("{}.w", path))?;
                let b = binds.bind(g, store, &format!("{}.b", path))?;
                g.affine(x, w, Some(b))?
            }
            Unit::Dropout { p } => {
                if ctx.mode == Mode::Train && *p > 0.0 {
                    g.dropout(x, *p, ctx.rng)?
                } else {
                    x
                }
            }
            Unit::GlobalAvgPool => {
                let pooled = g.avg_pool_global(x)?;
                let d = g.value(pooled).dims().to_vec();
                g.reshape(pooled, &[d[0], d[1]])?
            }
            Unit::Residual { body, shortcut } => {
                let main = run_units(g, store, binds, body, x, timesteps, ctx)?;
                let side = if shortcut.is_empty() {
                    x
                } else {
                    run_units(g, store, binds, shortcut, x, timesteps, ctx)?
                };
                g.add(main, side)?
            }
        };
    }
    Ok(x)
}

struct Builder {
    store: ParamStore,
    units: Vec<Unit>,
    seed: u64,
}

impl Builder {
    fn conv(&mut self, path: &str, in_c: usize, out_c: usize, k: usize, stride: usize) -> Result<Unit> {
        let name = format!("{}.kernel", path);
        let mut rng = param_rng(self.seed, &name);
        self.store.insert(
            &name,
            kaiming_uniform(&[out_c, in_c, k, k], in_c * k * k, &mut rng),
            true,
        )?;
        Ok(Unit::Conv {
            path: path.to_string(),
            stride,
            pad: k / 2,
        })
    }

    fn bn(&mut self, path: &str, c: usize) -> Result<Unit> {
        register_batch_norm(&mut self.store, path, c)?;
        Ok(Unit::Bn {
            path: path.to_string(),
        })
    }

    fn affine(&mut self, path: &str, in_d: usize, out_d: usize) -> Result<Unit> {
        let wname = format!("{}.w", path);
        let mut rng = param_rng(self.seed, &wname);
        self.store
            .insert(&wname, kaiming_uniform(&[in_d, out_d], in_d, &mut rng), true)?;
        self.store
            .insert(&format!("{}.b", path), Tensor::zeros(&[out_d]), true)?;
        Ok(Unit::Affine {
            path: path.to_string(),
        })
    }

    fn sma(
        &mut self,
        prefix: &str,
        cfg: crate::sma::SmaConfig,
        timesteps: usize,
        channels: usize,
        azo: Option<AzoConfig>,
    ) -> Result<Unit> {
        let layer = SmaLayer::new(prefix, cfg, timesteps, channels)?;
        layer.init(&mut self.store, self.seed)?;
        Ok(Unit::Sma { layer, azo })
    }
}

impl Model {
    pub fn build(mut config: ModelConfig, seed: u64) -> Result<Model> {
        config.fill_defaults();
        config.validate()?;
        match config.kind {
            ModelKind::Vgg => Self::build_vgg(config, seed),
            ModelKind::MsResnet => Self::build_ms_resnet(config, seed),
        }
    }

    fn build_vgg(config: ModelConfig, seed: u64) -> Result<Model> {
        let placement = config.placement()?;
        let neuron = config.neuron.resolve()?;
        let t = config.timesteps;
        let n_conv = config.blocks.len();
        let total = n_conv + 2; // conv blocks + two head affines
        let set = config::placement_set(placement.tier, total);
        let mut b = Builder {
            store: ParamStore::new(),
            units: Vec::new(),
            seed,
        };
        let [mut c, mut h, mut w] = config.input;
        let mut sma_blocks = BTreeSet::new();
        for (i0, blk) in config.blocks.iter().enumerate() {
            let idx = i0 + 1;
            let path = format!("b{}", idx);
            let here = set.contains(&idx);
            let sma_cfg = blk
                .sma
                .as_ref()
                .unwrap_or(&config.sma)
                .resolve(config.kind, &config.neuron)?;
            let azo_cfg = blk.azo.as_ref().unwrap_or(&config.azo).resolve()?;
            if idx > 1 {
                b.units.push(Unit::Lif {
                    path: format!("{}.lif", path),
                    cfg: neuron.clone(),
                });
            }
            if here && placement.position == SmaPosition::AfterNeuron {
                let u = b.sma(&format!("{}.sma", path), sma_cfg.clone(), t, c, azo_cfg.clone())?;
                b.units.push(u);
                sma_blocks.insert(idx);
            }
            let u = b.conv(&format!("{}.conv", path), c, blk.width, blk.kernel, 1)?;
            b.units.push(u);
            if here && placement.position == SmaPosition::AfterConv {
                let u = b.sma(&format!("{}.sma", path), sma_cfg, t, blk.width, azo_cfg)?;
                b.units.push(u);
                sma_blocks.insert(idx);
            }
            let u = b.bn(&format!("{}.bn", path), blk.width)?;
            b.units.push(u);
            if h < 2 || w < 2 {
                return Err(Error::Config(format!(
                    "spatial extent {}x{} exhausted before block {} pool",
                    h, w, idx
                )));
            }
            b.units.push(Unit::MaxPool);
            c = blk.width;
            h /= 2;
            w /= 2;
        }
        let flat = c * h * w;
        let hidden = config.head.hidden.unwrap_or(128);
        let dropout = config.head.dropout.unwrap_or(0.5);
        b.units.push(Unit::Flatten);
        let u = b.affine("head.fc1", flat, hidden)?;
        b.units.push(u);
        if dropout > 0.0 {
            b.units.push(Unit::Dropout { p: dropout });
        }
        b.units.push(Unit::Lif {
            path: "head.lif".into(),
            cfg: neuron,
        });
        let u = b.affine("head.fc2", hidden, config.classes)?;
        b.units.push(u);
        Ok(Model {
            config,
            store: b.store,
            units: b.units,
            sma_blocks,
        })
    }

    fn build_ms_resnet(config: ModelConfig, seed: u64) -> Result<Model> {
        let placement = config.placement()?;
        let neuron = config.neuron.resolve()?;
        let t = config.timesteps;
        let n_stages = config.blocks.len();
        let total = 1 + n_stages + 1; // stem + stages + head affine
        let set = config::placement_set(placement.tier, total);
        let mut b = Builder {
            store: ParamStore::new(),
            units: Vec::new(),
            seed,
        };
        let [in_c, mut h, mut w] = config.input;
        let mut sma_blocks = BTreeSet::new();
        let stem_w = config.blocks[0].width;
        let stem_k = config.blocks[0].kernel;
        let u = b.conv("stem.conv", in_c, stem_w, stem_k, 1)?;
        b.units.push(u);
        let u = b.bn("stem.bn", stem_w)?;
        b.units.push(u);
        if set.contains(&1) {
            return Err(Error::Config(
                "this placement tier targets the encoding block; the MS-ResNet stem carries no \
                 SMA slot, pick a tier that starts at the first stage"
                    .into(),
            ));
        }
        let mut c = stem_w;
        for (s0, stage) in config.blocks.iter().enumerate() {
            let stage_no = s0 + 1;
            let block_idx = stage_no + 1; // stem is block 1
            let path = format!("s{}", stage_no);
            let sma_cfg = stage
                .sma
                .as_ref()
                .unwrap_or(&config.sma)
                .resolve(config.kind, &config.neuron)?;
            let azo_cfg = stage.azo.as_ref().unwrap_or(&config.azo).resolve()?;
            if stage_no > 1 {
                // stride-2 width transition opens every later stage
                b.units.push(Unit::Lif {
                    path: format!("{}.trans.lif", path),
                    cfg: neuron.clone(),
                });
                let u = b.conv(&format!("{}.trans.conv", path), c, stage.width, stage.kernel, 2)?;
                b.units.push(u);
                let u = b.bn(&format!("{}.trans.bn", path), stage.width)?;
                b.units.push(u);
                c = stage.width;
                h = (h + 1) / 2;
                w = (w + 1) / 2;
            }
            if set.contains(&block_idx) {
                let u = b.sma(&format!("{}.sma", path), sma_cfg, t, c, azo_cfg)?;
                b.units.push(u);
                sma_blocks.insert(block_idx);
            }
            for bi in 0..stage.blocks {
                let bpath = format!("{}.b{}", path, bi + 1);
                let unit = b.residual_block(&bpath, c, stage.kernel, &neuron, config.bottleneck)?;
                b.units.push(unit);
            }
        }
        b.units.push(Unit::Lif {
            path: "head.lif".into(),
            cfg: neuron,
        });
        b.units.push(Unit::GlobalAvgPool);
        let dropout = config.head.dropout.unwrap_or(0.0);
        if dropout > 0.0 {
            b.units.push(Unit::Dropout { p: dropout });
        }
        let u = b.affine("head.fc", c, config.classes)?;
        b.units.push(u);
        Ok(Model {
            config,
            store: b.store,
            units: b.units,
            sma_blocks,
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: Value,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<Forward> {
        self.forward_captured(g, x, mode, rng, &[])
    }

    /// Forward pass that additionally keeps the spike tensors of the named
    /// LIF layers (for heatmaps and per-sample audits).
    pub fn forward_captured(
        &mut self,
        g: &mut Graph,
        x: Value,
        mode: Mode,
        rng: &mut SeededRng,
        capture: &[String],
    ) -> Result<Forward> {
        let d = g.value(x).dims().to_vec();
        let t = self.config.timesteps;
        if d.len() != 4 || d[0] % t != 0 || d[1] != self.config.input[0] {
            return Err(Error::Shape(format!(
                "expected [T*B, {}, H, W] input with T = {}, got {}",
                self.config.input[0],
                t,
                g.value(x).shape()
            )));
        }
        let mut binds = Bindings::new();
        let mut ctx = FwCtx {
            mode,
            rng,
            capture,
            traces: Vec::new(),
            reports: Vec::new(),
            spikes: Vec::new(),
            captured: Vec::new(),
        };
        let logits = run_units(g, &mut self.store, &mut binds, &self.units, x, t, &mut ctx)?;
        Ok(Forward {
            logits,
            binds,
            traces: ctx.traces,
            azo_reports: ctx.reports,
            spikes: ctx.spikes,
            captured: ctx.captured,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.config.timesteps
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.store.scalar_count(true)
    }

    /// 1-based placement-list indices of blocks that carry SMA.
    pub fn sma_blocks(&self) -> &BTreeSet<usize> {
        &self.sma_blocks
    }

    /// Paths of every LIF layer in forward order.
    pub fn lif_paths(&self) -> Vec<String> {
        fn walk(units: &[Unit], out: &mut Vec<String>) {
            for u in units {
                match u {
                    Unit::Lif { path, .. } => out.push(path.clone()),
                    Unit::Residual { body, shortcut } => {
                        walk(body, out);
                        walk(shortcut, out);
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.units, &mut out);
        out
    }

    /// Every SMA site as (prefix, timesteps, channels) in forward order.
    pub fn sma_sites(&self) -> Vec<(String, usize, usize)> {
        fn walk(units: &[Unit], out: &mut Vec<(String, usize, usize)>) {
            for u in units {
                match u {
                    Unit::Sma { layer, .. } => {
                        out.push((layer.prefix.clone(), layer.timesteps, layer.channels))
                    }
                    Unit::Residual { body, shortcut } => {
                        walk(body, out);
                        walk(shortcut, out);
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.units, &mut out);
        out
    }

    /// Whether any SMA site has AZO wiring attached.
    pub fn has_azo(&self) -> bool {
        fn walk(units: &[Unit]) -> bool {
            units.iter().any(|u| match u {
                Unit::Sma { azo, .. } => azo.is_some(),
                Unit::Residual { body, shortcut } => walk(body) || walk(shortcut),
                _ => false,
            })
        }
        walk(&self.units)
    }

    pub fn save(&self, path: &Path, extra_meta: &IndexMap<String, String>) -> Result<()> {
        let mut meta = IndexMap::new();
        meta.insert(CONFIG_META_KEY.to_string(), self.config.to_toml_string()?);
        for (k, v) in extra_meta {
            meta.insert(k.clone(), v.clone());
        }
        write_store(path, &self.store, &meta)
    }

    /// Rebuild the model recorded in a saved container and adopt its
    /// parameters.
    pub fn load(path: &Path) -> Result<(Model, IndexMap<String, String>)> {
        let (loaded, meta) = read_store(path)?;
        let cfg_text = meta.get(CONFIG_META_KEY).ok_or_else(|| {
            Error::format(path, format!("missing {:?} metadata entry", CONFIG_META_KEY))
        })?;
        let config = ModelConfig::from_toml_str(cfg_text)?;
        let mut model = Model::build(config, 0)?;
        model.store.adopt(loaded)?;
        Ok((model, meta))
    }

    /// Adopt parameters from a container into this model, requiring exact
    /// name/shape agreement.
    pub fn load_params_from(&mut self, path: &Path) -> Result<IndexMap<String, String>> {
        let (loaded, meta) = read_store(path)?;
        self.store.adopt(loaded)?;
        Ok(meta)
    }
}

impl Builder {
    /// Membrane-shortcut residual block: LIF-Conv-BN twice (or the 1x1 /
    /// kxk / 1x1 bottleneck), identity added after the BN stack. A width or
    /// stride change puts a 1x1 Conv-BN on the shortcut.
    fn residual_block(
        &mut self,
        path: &str,
        c: usize,
        k: usize,
        neuron: &NeuronConfig,
        bottleneck: bool,
    ) -> Result<Unit> {
        let mut body = Vec::new();
        if bottleneck {
            if c % 4 != 0 {
                return Err(Error::Config(format!(
                    "bottleneck width {} must divide by 4",
                    c
                )));
            }
            let mid = c / 4;
            let specs: [(usize, usize, usize); 3] = [(c, mid, 1), (mid, mid, k), (mid, c, 1)];
            for (li, (ic, oc, kk)) in specs.into_iter().enumerate() {
                body.push(Unit::Lif {
                    path: format!("{}.lif{}", path, li + 1),
                    cfg: neuron.clone(),
                });
                let u = self.conv(&format!("{}.conv{}", path, li + 1), ic, oc, kk, 1)?;
                body.push(u);
                let u = self.bn(&format!("{}.bn{}", path, li + 1), oc)?;
                body.push(u);
            }
        } else {
            for li in 1..=2 {
                body.push(Unit::Lif {
                    path: format!("{}.lif{}", path, li),
                    cfg: neuron.clone(),
                });
                let u = self.conv(&format!("{}.conv{}", path, li), c, c, k, 1)?;
                body.push(u);
                let u = self.bn(&format!("{}.bn{}", path, li), c)?;
                body.push(u);
            }
        }
        Ok(Unit::Residual {
            body,
            shortcut: Vec::new(),
        })
    }

    /// Shape-changing residual block used when a stage needs an in-stack
    /// transition; the shortcut is a 1x1 Conv-BN.
    #[allow(dead_code)]
    fn residual_block_transition(
        &mut self,
        path: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        neuron: &NeuronConfig,
    ) -> Result<Unit> {
        let mut body = Vec::new();
        body.push(Unit::Lif {
            path: format!("{}.lif1", path),
            cfg: neuron.clone(),
        });
        let u = self.conv(&format!("{}.conv1", path), in_c, out_c, k, stride)?;
        body.push(u);
        let u = self.bn(&format!("{}.bn1", path), out_c)?;
        body.push(u);
        body.push(Unit::Lif {
            path: format!("{}.lif2", path),
            cfg: neuron.clone(),
        });
        let u = self.conv(&format!("{}.conv2", path), out_c, out_c, k, 1)?;
        body.push(u);
        let u = self.bn(&format!("{}.bn2", path), out_c)?;
        body.push(u);
        let mut shortcut = Vec::new();
        let u = self.conv(&format!("{}.short.conv", path), in_c, out_c, 1, stride)?;
        shortcut.push(u);
        let u = self.bn(&format!("{}.short.bn", path), out_c)?;
        shortcut.push(u);
        Ok(Unit::Residual { body, shortcut })
    }
}
