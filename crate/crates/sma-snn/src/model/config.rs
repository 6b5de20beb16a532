//! Declarative model configuration.
//!
//! Models are described by a TOML document: a network kind, a placement
//! policy, timestep/class counts, and per-block sections, with optional
//! `[neuron]`, `[sma]`, `[azo]`, and `[head]` tables. The same document is
//! embedded in checkpoints, so a saved model rebuilds without its original
//! config file.
//!
//! ```toml
//! kind = "vgg"
//! placement = "S3+L1"
//! timesteps = 8
//! classes = 4
//! input = [2, 32, 32]
//!
//! [sma]
//! scales = 4
//! kernels = [1, 3, 5, 7]
//! cr = 4
//! tr = 4
//!
//! [[block]]
//! width = 16
//!
//! [[block]]
//! width = 32
//! ```
//!
//! Placement combines a tier with an in-block position, e.g. `T3+L1`.
//! Tiers T1..T4 and S1..S4 choose which blocks carry SMA, counted over the
//! full block list (conv blocks, then head blocks) starting at 1 with the
//! encoding block first. The position is L1 (immediately after the
//! convolution) or L3 (after the neuron). L2 (after batch norm) is refused:
//! attention on normalized data destabilizes training to the point of
//! non-convergence, so it is a build error rather than a footgun.

use crate::azo::{AzoConfig, RankReduce};
use crate::error::{Error, Result};
use crate::neuron::{NeuronConfig, Surrogate};
use crate::sma::{EncoderAct, SmaConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "vgg")]
    Vgg,
    #[serde(rename = "ms-resnet")]
    MsResnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementTier {
    T1,
    T2,
    T3,
    T4,
    S1,
    S2,
    S3,
    S4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmaPosition {
    /// L1: between the convolution and its batch norm.
    AfterConv,
    /// L3: directly after the neuron, before the convolution.
    AfterNeuron,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub tier: PlacementTier,
    pub position: SmaPosition,
}

impl Placement {
    pub fn parse(s: &str) -> Result<Placement> {
        let (tier_s, pos_s) = s
            .split_once('+')
            .ok_or_else(|| Error::Config(format!("placement {:?} is not TIER+POSITION", s)))?;
        let tier = match tier_s {
            "T1" => PlacementTier::T1,
            "T2" => PlacementTier::T2,
            "T3" => PlacementTier::T3,
            "T4" => PlacementTier::T4,
            "S1" => PlacementTier::S1,
            "S2" => PlacementTier::S2,
            "S3" => PlacementTier::S3,
            "S4" => PlacementTier::S4,
            other => {
                return Err(Error::Config(format!(
                    "unknown placement tier {:?} (expected T1-T4 or S1-S4)",
                    other
                )))
            }
        };
        let position = match pos_s {
            "L1" => SmaPosition::AfterConv,
            "L3" => SmaPosition::AfterNeuron,
            "L2" => {
                return Err(Error::Config(
                    "placement L2 puts attention after batch norm, which strips the magnitude \
                     cues the attention needs and makes training fail to converge; use L1 \
                     (after the convolution) or L3 (after the neuron)"
                        .into(),
                ))
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown SMA position {:?} (expected L1 or L3)",
                    other
                )))
            }
        };
        Ok(Placement { tier, position })
    }

    pub fn to_string_id(self) -> String {
        let tier = match self.tier {
            PlacementTier::T1 => "T1",
            PlacementTier::T2 => "T2",
            PlacementTier::T3 => "T3",
            PlacementTier::T4 => "T4",
            PlacementTier::S1 => "S1",
            PlacementTier::S2 => "S2",
            PlacementTier::S3 => "S3",
            PlacementTier::S4 => "S4",
        };
        let pos = match self.position {
            SmaPosition::AfterConv => "L1",
            SmaPosition::AfterNeuron => "L3",
        };
        format!("{}+{}", tier, pos)
    }
}

/// Which 1-based block indices (over `total` blocks, encoding block = 1)
/// carry SMA under a tier.
pub fn placement_set(tier: PlacementTier, total: usize) -> BTreeSet<usize> {
    let all = 1..=total;
    match tier {
        PlacementTier::T1 => BTreeSet::new(),
        PlacementTier::T2 => [1].into_iter().collect(),
        PlacementTier::T3 => all.filter(|&i| i != 1).collect(),
        PlacementTier::T4 => all.collect(),
        PlacementTier::S1 => all.filter(|&i| i % 2 == 1 && i != 1).collect(),
        PlacementTier::S2 => all.filter(|&i| i % 2 == 0).collect(),
        PlacementTier::S3 => {
            let half = total.div_ceil(2);
            (2..=half).collect()
        }
        PlacementTier::S4 => (total / 2 + 1..=total).collect(),
    }
}

fn default_tau() -> f64 {
    2.0
}
fn default_threshold() -> f64 {
    1.0
}
fn default_surrogate() -> String {
    "atan".into()
}
fn default_alpha() -> f64 {
    2.0
}
fn default_width() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronToml {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_threshold")]
    pub u_threshold: f64,
    #[serde(default)]
    pub u_reset: f64,
    #[serde(default = "default_surrogate")]
    pub surrogate: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default = "default_true")]
    pub detach_reset: bool,
}

impl Default for NeuronToml {
    fn default() -> Self {
        NeuronToml {
            tau: default_tau(),
            u_threshold: default_threshold(),
            u_reset: 0.0,
            surrogate: default_surrogate(),
            alpha: default_alpha(),
            width: default_width(),
            detach_reset: true,
        }
    }
}

impl NeuronToml {
    pub fn resolve(&self) -> Result<NeuronConfig> {
        let surrogate = match self.surrogate.as_str() {
            "atan" => Surrogate::ATan { alpha: self.alpha },
            "rect" => Surrogate::RectWindow { width: self.width },
            other => {
                return Err(Error::Config(format!(
                    "unknown surrogate {:?} (expected \"atan\" or \"rect\")",
                    other
                )))
            }
        };
        let cfg = NeuronConfig {
            tau: self.tau,
            u_threshold: self.u_threshold,
            u_reset: self.u_reset,
            surrogate,
            detach_reset: self.detach_reset,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_scales() -> usize {
    4
}
fn default_kernels() -> Vec<usize> {
    vec![1, 3, 5, 7]
}
fn default_cr() -> usize {
    4
}
fn default_encoder() -> String {
    "relu".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmaToml {
    #[serde(default = "default_scales")]
    pub scales: usize,
    #[serde(default = "default_kernels")]
    pub kernels: Vec<usize>,
    #[serde(default = "default_cr")]
    pub cr: usize,
    /// Defaults to 4 on VGG and 1 on MS-ResNet when omitted.
    #[serde(default)]
    pub tr: Option<usize>,
    #[serde(default = "default_encoder")]
    pub encoder: String,
}

impl Default for SmaToml {
    fn default() -> Self {
        SmaToml {
            scales: default_scales(),
            kernels: default_kernels(),
            cr: default_cr(),
            tr: None,
            encoder: default_encoder(),
        }
    }
}

impl SmaToml {
    pub fn resolve(&self, kind: ModelKind, neuron: &NeuronToml) -> Result<SmaConfig> {
        let encoder_act = match self.encoder.as_str() {
            "relu" => EncoderAct::Relu,
            "lif" => EncoderAct::Lif(neuron.resolve()?),
            other => {
                return Err(Error::Config(format!(
                    "unknown SMA encoder {:?} (expected \"relu\" or \"lif\")",
                    other
                )))
            }
        };
        let tr = self.tr.unwrap_or(match kind {
            ModelKind::Vgg => 4,
            ModelKind::MsResnet => 1,
        });
        let cfg = SmaConfig {
            scales: self.scales,
            kernel_sizes: self.kernels.clone(),
            channel_reduction: self.cr,
            time_reduction: tr,
            encoder_act,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_ratio() -> f64 {
    4.0
}
fn default_reduce() -> String {
    "mean".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AzoToml {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_ratio")]
    pub rtr: f64,
    #[serde(default = "default_ratio")]
    pub rcr: f64,
    #[serde(default = "default_reduce")]
    pub reduce: String,
    #[serde(default)]
    pub channel_guard: bool,
}

impl Default for AzoToml {
    fn default() -> Self {
        AzoToml {
            enabled: false,
            rtr: default_ratio(),
            rcr: default_ratio(),
            reduce: default_reduce(),
            channel_guard: false,
        }
    }
}

impl AzoToml {
    pub fn resolve(&self) -> Result<Option<AzoConfig>> {
        if !self.enabled {
            return Ok(None);
        }
        let reduce = match self.reduce.as_str() {
            "mean" => RankReduce::Mean,
            "max" => RankReduce::Max,
            other => {
                return Err(Error::Config(format!(
                    "unknown AZO reduce {:?} (expected \"mean\" or \"max\")",
                    other
                )))
            }
        };
        let cfg = AzoConfig {
            rtr: self.rtr,
            rcr: self.rcr,
            reduce,
            channel_guard: self.channel_guard,
        };
        cfg.validate()?;
        Ok(Some(cfg))
    }
}

fn default_kernel() -> usize {
    3
}
fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockToml {
    pub width: usize,
    /// Conv kernel (VGG blocks) or residual conv kernel (MS-ResNet).
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Residual blocks per stage (MS-ResNet only).
    #[serde(default = "default_one")]
    pub blocks: usize,
    /// Per-block SMA override.
    #[serde(default)]
    pub sma: Option<SmaToml>,
    /// Per-block AZO override.
    #[serde(default)]
    pub azo: Option<AzoToml>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HeadToml {
    /// Hidden affine width before the output layer (VGG only).
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Dropout probability; defaults to 0.5 on VGG heads, 0 on MS-ResNet.
    #[serde(default)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub placement: String,
    pub timesteps: usize,
    pub classes: usize,
    /// (channels, height, width) of one input frame.
    pub input: [usize; 3],
    #[serde(default)]
    pub bottleneck: bool,
    #[serde(default)]
    pub neuron: NeuronToml,
    #[serde(default)]
    pub sma: SmaToml,
    #[serde(default)]
    pub azo: AzoToml,
    #[serde(rename = "block", default)]
    pub blocks: Vec<BlockToml>,
    #[serde(default)]
    pub head: HeadToml,
}

impl ModelConfig {
    pub fn from_toml_str(s: &str) -> Result<ModelConfig> {
        let mut cfg: ModelConfig = toml::from_str(s)
            .map_err(|e| Error::Config(format!("model config parse error: {}", e)))?;
        cfg.fill_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("model config serialize: {}", e)))
    }

    /// Default block lists when `[[block]]` sections are omitted.
    pub fn fill_defaults(&mut self) {
        if self.blocks.is_empty() {
            self.blocks = match self.kind {
                ModelKind::Vgg => [16, 32, 64]
                    .into_iter()
                    .map(|w| BlockToml {
                        width: w,
                        kernel: 3,
                        blocks: 1,
                        sma: None,
                        azo: None,
                    })
                    .collect(),
                ModelKind::MsResnet => [32, 64]
                    .into_iter()
                    .map(|w| BlockToml {
                        width: w,
                        kernel: 3,
                        blocks: 2,
                        sma: None,
                        azo: None,
                    })
                    .collect(),
            };
        }
    }

    pub fn placement(&self) -> Result<Placement> {
        Placement::parse(&self.placement)
    }

    pub fn validate(&self) -> Result<()> {
        self.placement()?;
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "input extents must be positive, got {:?}",
                self.input
            )));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("at least one block is required".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.width == 0 {
                return Err(Error::Config(format!("block {} has zero width", i + 1)));
            }
            if b.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "block {} kernel {} must be odd",
                    i + 1,
                    b.kernel
                )));
            }
            if b.blocks == 0 {
                return Err(Error::Config(format!("block {} has zero depth", i + 1)));
            }
        }
        if let Some(p) = self.head.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "head dropout must lie in [0, 1), got {}",
                    p
                )));
            }
        }
        self.neuron.resolve()?;
        self.sma.resolve(self.kind, &self.neuron)?;
        self.azo.resolve()?;
        Ok(())
    }

    /// Desk-scale VGG: 3 conv blocks (16, 32, 64), SMA per S3+L1.
    pub fn desk_vgg(timesteps: usize, classes: usize, height: usize, width: usize) -> ModelConfig {
        let mut cfg = ModelConfig {
            kind: ModelKind::Vgg,
            placement: "S3+L1".into(),
            timesteps,
            classes,
            input: [2, height, width],
            bottleneck: false,
            neuron: NeuronToml::default(),
            sma: SmaToml::default(),
            azo: AzoToml::default(),
            blocks: Vec::new(),
            head: HeadToml::default(),
        };
        cfg.fill_defaults();
        cfg
    }

    /// Desk-scale MS-ResNet: 2 stages of 2 blocks (32, 64), SMA per stage.
    pub fn desk_ms_resnet(
        timesteps: usize,
        classes: usize,
        height: usize,
        width: usize,
    ) -> ModelConfig {
        let mut cfg = ModelConfig {
            kind: ModelKind::MsResnet,
            placement: "T3+L1".into(),
            timesteps,
            classes,
            input: [2, height, width],
            bottleneck: false,
            neuron: NeuronToml::default(),
            sma: SmaToml::default(),
            azo: AzoToml::default(),
            blocks: Vec::new(),
            head: HeadToml::default(),
        };
        cfg.fill_defaults();
        cfg
    }
}
