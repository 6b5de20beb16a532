//! Spiking Multiscale Attention.
//!
//! The module runs N parallel encoder branches over the input frames, one
//! per kernel scale: conv (C to C, same padding, no bias), per-scale batch
//! norm, then ReLU or a LIF neuron. The branch mean feeds two squeeze-and-
//! excitation decoders that score the scales. The temporal decoder pools
//! each timestep to a single number and maps the length-T vector through a
//! shared squeeze (T to T/TR) and N per-scale excitations back to T; the
//! channel decoder does the same per timestep over channels with reduction
//! CR. Both decoder outputs are softmaxed across the scale axis, so for
//! every timestep (and every timestep-channel pair) the N scale weights sum
//! to one. The output recombines the branches:
//!
//! `Z[t,c,h,w] = sum_n M[n,t,c,h,w] * W_alpha[n,t] * W_beta[t,n,c]`
//!
//! which keeps the input shape, so the layer can sit between any two
//! equal-width layers. With all per-scale parameters tied the weights
//! collapse to 1/N on both branches and Z reduces to the branch mean
//! divided by N.
//!
//! Activations arrive as `[T*B, C, H, W]` with time outermost; batch size
//! is inferred from the leading extent.

use crate::error::{Error, Result};
use crate::graph::{BnCfg, Graph, Mode, Value};
use crate::neuron::{lif_sequence, NeuronConfig, SpikeMode};
use crate::params::{
    apply_batch_norm, kaiming_uniform, param_rng, register_batch_norm, Bindings, ParamStore,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderAct {
    Relu,
    Lif(NeuronConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmaConfig {
    /// Scale count N.
    pub scales: usize,
    /// One odd kernel size per scale, strictly increasing.
    pub kernel_sizes: Vec<usize>,
    /// Channel squeeze ratio CR; the attached width must divide by it.
    pub channel_reduction: usize,
    /// Temporal squeeze ratio TR; the timestep count must divide by it.
    pub time_reduction: usize,
    pub encoder_act: EncoderAct,
}

impl Default for SmaConfig {
    fn default() -> Self {
        SmaConfig {
            scales: 4,
            kernel_sizes: vec![1, 3, 5, 7],
            channel_reduction: 4,
            time_reduction: 4,
            encoder_act: EncoderAct::Relu,
        }
    }
}

impl SmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(Error::Config(format!(
                "SMA needs at least 2 scales, got {}",
                self.scales
            )));
        }
        if self.kernel_sizes.len() != self.scales {
            return Err(Error::Config(format!(
                "{} kernel sizes for {} scales",
                self.kernel_sizes.len(),
                self.scales
            )));
        }
        for pair in self.kernel_sizes.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config(format!(
                    "kernel sizes must increase strictly, got {:?}",
                    self.kernel_sizes
                )));
            }
        }
        for &k in &self.kernel_sizes {
            if k % 2 == 0 {
                return Err(Error::Config(format!(
                    "kernel sizes must be odd, got {:?}",
                    self.kernel_sizes
                )));
            }
        }
        if self.channel_reduction == 0 || self.time_reduction == 0 {
            return Err(Error::Config("reduction ratios must be >= 1".into()));
        }
        Ok(())
    }
}

/// Every intermediate of one forward pass as plain tensors: the per-scale
/// encoder outputs, their mean merge, both weight families and the output.
#[derive(Debug, Clone)]
pub struct SmaParts {
    /// One `[T*B, C, H, W]` tensor per scale.
    pub branches: Vec<Tensor>,
    /// `(1/N) * sum_n branches[n]`.
    pub merged: Tensor,
    /// `[B, N, T]`.
    pub w_alpha: Tensor,
    /// `[T*B, N, C]`.
    pub w_beta: Tensor,
    /// `[T*B, C, H, W]`.
    pub z: Tensor,
    pub batch: usize,
}

struct Staged {
    branches: Vec<Value>,
    merged: Value,
    w_alpha: Value,
    w_beta: Value,
    z: Value,
    batch: usize,
}

/// Per-branch attention weights captured during a forward pass, plus the
/// share of the combined weight mass each scale received.
#[derive(Debug, Clone)]
pub struct SmaTrace {
    /// `[B, N, T]`; for each (sample, timestep) the N entries sum to 1.
    pub w_alpha: Tensor,
    /// `[T, B, N, C]`; for each (sample, timestep, channel) the N entries
    /// sum to 1.
    pub w_beta: Tensor,
    /// Length N, sums to 1: mean over (sample, t, c) of each scale's share
    /// of the product weight `w_alpha * w_beta`.
    pub importance: Vec<f64>,
}

impl SmaTrace {
    /// Rows `sample,t,n,w_alpha`.
    pub fn alpha_csv(&self, first_sample_id: usize) -> String {
        let d = self.w_alpha.dims();
        let (b, n, t) = (d[0], d[1], d[2]);
        let mut out = String::from("sample,t,n,w_alpha\n");
        for bi in 0..b {
            for ti in 0..t {
                for ni in 0..n {
                    out.push_str(&format!(
                        "{},{},{},{}\n",
                        first_sample_id + bi,
                        ti,
                        ni,
                        self.w_alpha.at(&[bi, ni, ti])
                    ));
                }
            }
        }
        out
    }

    /// Rows `sample,t,n,c,w_beta`.
    pub fn beta_csv(&self, first_sample_id: usize) -> String {
        let d = self.w_beta.dims();
        let (t, b, n, c) = (d[0], d[1], d[2], d[3]);
        let mut out = String::from("sample,t,n,c,w_beta\n");
        for bi in 0..b {
            for ti in 0..t {
                for ni in 0..n {
                    for ci in 0..c {
                        out.push_str(&format!(
                            "{},{},{},{},{}\n",
                            first_sample_id + bi,
                            ti,
                            ni,
                            ci,
                            self.w_beta.at(&[ti, bi, ni, ci])
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Decoder tensor sizes for width `c` and `t` timesteps:
/// `(weights, biases)` where weights are `(N+1) * T^2/TR + (N+1) * C^2/CR`
/// and biases `T/TR + N*T + C/CR + N*C`.
pub fn decoder_param_counts(t: usize, c: usize, cfg: &SmaConfig) -> (usize, usize) {
    let n = cfg.scales;
    let tq = t / cfg.time_reduction;
    let cq = c / cfg.channel_reduction;
    let weights = (n + 1) * t * tq + (n + 1) * c * cq;
    let biases = tq + n * t + cq + n * c;
    (weights, biases)
}

/// Total trainable scalars of one SMA layer: encoder convs and their BN
/// affine pairs plus the decoder counts above. Running stats are frozen and
/// excluded.
pub fn sma_param_counts(t: usize, c: usize, cfg: &SmaConfig) -> usize {
    let encoder: usize = cfg.kernel_sizes.iter().map(|k| c * c * k * k).sum::<usize>()
        + cfg.scales * 2 * c;
    let (weights, biases) = decoder_param_counts(t, c, cfg);
    encoder + weights + biases
}

/// An SMA layer attached at a fixed width and timestep count. Parameters
/// live in a `ParamStore` under `prefix`.
#[derive(Debug, Clone)]
pub struct SmaLayer {
    pub prefix: String,
    pub cfg: SmaConfig,
    pub timesteps: usize,
    pub channels: usize,
    pub bn: BnCfg,
}

impl SmaLayer {
    pub fn new(prefix: &str, cfg: SmaConfig, timesteps: usize, channels: usize) -> Result<Self> {
        cfg.validate()?;
        if timesteps == 0 || channels == 0 {
            return Err(Error::Config(
                "SMA needs positive timesteps and channels".into(),
            ));
        }
        if timesteps % cfg.time_reduction != 0 {
            return Err(Error::Config(format!(
                "timesteps {} not divisible by time reduction {}",
                timesteps, cfg.time_reduction
            )));
        }
        if channels % cfg.channel_reduction != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by channel reduction {}",
                channels, cfg.channel_reduction
            )));
        }
        Ok(SmaLayer {
            prefix: prefix.to_string(),
            cfg,
            timesteps,
            channels,
            bn: BnCfg::default(),
        })
    }

    fn name(&self, rest: &str) -> String {
        format!("{}.{}", self.prefix, rest)
    }

    /// Register all tensors. Each draws from an RNG keyed by (seed, name),
    /// so values do not depend on registration order.
    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let c = self.channels;
        let t = self.timesteps;
        let tq = t / self.cfg.time_reduction;
        let cq = c / self.cfg.channel_reduction;
        for (n, &k) in self.cfg.kernel_sizes.iter().enumerate() {
            let name = self.name(&format!("enc{}.kernel", n));
            let mut rng = param_rng(seed, &name);
            store.insert(&name, kaiming_uniform(&[c, c, k, k], c * k * k, &mut rng), true)?;
            register_batch_norm(store, &self.name(&format!("enc{}.bn", n)), c)?;
        }
        let squeeze_specs: [(&str, usize, usize); 2] = [("tmse", t, tq), ("cmse", c, cq)];
        for (branch, full, red) in squeeze_specs {
            let wname = self.name(&format!("{}.squeeze.w", branch));
            let mut rng = param_rng(seed, &wname);
            store.insert(&wname, kaiming_uniform(&[red, full, 1, 1], full, &mut rng), true)?;
            store.insert(&self.name(&format!("{}.squeeze.b", branch)), Tensor::zeros(&[red]), true)?;
            for n in 0..self.cfg.scales {
                let ename = self.name(&format!("{}.exc{}.w", branch, n));
                let mut rng = param_rng(seed, &ename);
                store.insert(&ename, kaiming_uniform(&[full, red, 1, 1], red, &mut rng), true)?;
                store.insert(
                    &self.name(&format!("{}.exc{}.b", branch, n)),
                    Tensor::zeros(&[full]),
                    true,
                )?;
            }
        }
        Ok(())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        binds: &mut Bindings,
        x: Value,
        mode: Mode,
    ) -> Result<Value> {
        Ok(self.run(g, store, binds, x, mode)?.z)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        binds: &mut Bindings,
        x: Value,
        mode: Mode,
    ) -> Result<(Value, SmaTrace)> {
        let s = self.run(g, store, binds, x, mode)?;
        let trace = self.trace_from(g.value(s.w_alpha), g.value(s.w_beta), s.batch)?;
        Ok((s.z, trace))
    }

    /// Like `forward`, but hands back every intermediate as a plain tensor
    /// so callers can audit the stages independently.
    pub fn forward_parts(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        binds: &mut Bindings,
        x: Value,
        mode: Mode,
    ) -> Result<SmaParts> {
        let s = self.run(g, store, binds, x, mode)?;
        Ok(SmaParts {
            branches: s.branches.iter().map(|&v| g.value(v).clone()).collect(),
            merged: g.value(s.merged).clone(),
            w_alpha: g.value(s.w_alpha).clone(),
            w_beta: g.value(s.w_beta).clone(),
            z: g.value(s.z).clone(),
            batch: s.batch,
        })
    }

    fn run(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        binds: &mut Bindings,
        x: Value,
        mode: Mode,
    ) -> Result<Staged> {
        let dims = g.value(x).dims().to_vec();
        if dims.len() != 4 || dims[1] != self.channels {
            return Err(Error::Shape(format!(
                "SMA {:?} expects [T*B, {}, H, W], got {}",
                self.prefix,
                self.channels,
                g.value(x).shape()
            )));
        }
        let t = self.timesteps;
        if dims[0] % t != 0 {
            return Err(Error::Shape(format!(
                "leading extent {} not divisible by {} timesteps",
                dims[0], t
            )));
        }
        let batch = dims[0] / t;
        let n_scales = self.cfg.scales;
        let c = self.channels;

        // Encoder branches and their running mean.
        let mut branches = Vec::with_capacity(n_scales);
        for (n, &k) in self.cfg.kernel_sizes.iter().enumerate() {
            let kernel = binds.bind(g, store, &self.name(&format!("enc{}.kernel", n)))?;
            let conv = g.conv2d(x, kernel, None, 1, k / 2)?;
            let normed = apply_batch_norm(
                g,
                store,
                binds,
                &self.name(&format!("enc{}.bn", n)),
                conv,
                self.bn,
                mode,
            )?;
            let m = match &self.cfg.encoder_act {
                EncoderAct::Relu => g.relu(normed),
                EncoderAct::Lif(ncfg) => lif_sequence(g, ncfg, normed, t, SpikeMode::Binary)?,
            };
            branches.push(m);
        }
        let mut acc = branches[0];
        for &m in &branches[1..] {
            acc = g.add(acc, m)?;
        }
        let y = g.scale(acc, 1.0 / n_scales as f64);

        // Temporal decoder: pool to one number per (t, b), treat T as the
        // channel axis of a 1x1 map, squeeze T -> T/TR, excite back per
        // scale, softmax across scales.
        let pooled_t = g.mean_axes(y, &[1, 2, 3], false)?;
        let tb = g.reshape(pooled_t, &[t, batch])?;
        let bt = g.permute(tb, &[1, 0])?;
        let tmap = g.reshape(bt, &[batch, t, 1, 1])?;
        let w_alpha = self.decode(g, store, binds, "tmse", tmap, t, batch)?;

        // Channel decoder: pool spatially per (t, b), squeeze C -> C/CR.
        let pooled_c = g.mean_axes(y, &[2, 3], true)?;
        let w_beta = self.decode(g, store, binds, "cmse", pooled_c, c, t * batch)?;

        // Recombine: Z = sum_n M_n * W_alpha[n] * W_beta[n].
        let mut z = None;
        for (n, &m) in branches.iter().enumerate() {
            let wa_n = g.narrow(w_alpha, 1, n, 1)?;
            let wa_bt = g.reshape(wa_n, &[batch, t])?;
            let wa_tb = g.permute(wa_bt, &[1, 0])?;
            let wa = g.reshape(wa_tb, &[t * batch, 1, 1, 1])?;
            let wb_n = g.narrow(w_beta, 1, n, 1)?;
            let wb = g.reshape(wb_n, &[t * batch, c, 1, 1])?;
            let scaled_t = g.mul(m, wa)?;
            let term = g.mul(scaled_t, wb)?;
            z = Some(match z {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        Ok(Staged {
            branches,
            merged: y,
            w_alpha,
            w_beta,
            z: z.expect("at least two scales"),
            batch,
        })
    }

    /// Shared squeeze plus per-scale excitation over a `[rows, full, 1, 1]`
    /// map, softmaxed across the scale axis. Returns `[rows, N, full]`.
    fn decode(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        binds: &mut Bindings,
        branch: &str,
        map: Value,
        full: usize,
        rows: usize,
    ) -> Result<Value> {
        let sw = binds.bind(g, store, &self.name(&format!("{}.squeeze.w", branch)))?;
        let sb = binds.bind(g, store, &self.name(&format!("{}.squeeze.b", branch)))?;
        let squeezed = g.conv2d(map, sw, Some(sb), 1, 0)?;
        let hidden = g.relu(squeezed);
        let mut per_scale = Vec::with_capacity(self.cfg.scales);
        for n in 0..self.cfg.scales {
            let ew = binds.bind(g, store, &self.name(&format!("{}.exc{}.w", branch, n)))?;
            let eb = binds.bind(g, store, &self.name(&format!("{}.exc{}.b", branch, n)))?;
            let excited = g.conv2d(hidden, ew, Some(eb), 1, 0)?;
            per_scale.push(g.reshape(excited, &[rows, 1, full])?);
        }
        let stack = g.concat(&per_scale, 1)?;
        g.softmax(stack, 1)
    }

    fn trace_from(&self, wa: &Tensor, wb: &Tensor, batch: usize) -> Result<SmaTrace> {
        let (t, c, n_scales) = (self.timesteps, self.channels, self.cfg.scales);
        let w_alpha = wa.clone();
        let w_beta = wb.reshape(&[t, batch, n_scales, c])?;
        let mut importance = vec![0.0; n_scales];
        let mut shares = vec![0.0; n_scales];
        for ti in 0..t {
            for bi in 0..batch {
                for ci in 0..c {
                    let mut total = 0.0;
                    for (ni, s) in shares.iter_mut().enumerate() {
                        *s = w_alpha.at(&[bi, ni, ti]) * w_beta.at(&[ti, bi, ni, ci]);
                        total += *s;
                    }
                    for (ni, s) in shares.iter().enumerate() {
                        importance[ni] += s / total;
                    }
                }
            }
        }
        let denom = (t * batch * c) as f64;
        for v in importance.iter_mut() {
            *v /= denom;
        }
        Ok(SmaTrace {
            w_alpha,
            w_beta,
            importance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg(scales: usize, kernels: &[usize], cr: usize, tr: usize) -> SmaConfig {
        SmaConfig {
            scales,
            kernel_sizes: kernels.to_vec(),
            channel_reduction: cr,
            time_reduction: tr,
            encoder_act: EncoderAct::Relu,
        }
    }

    fn random_input(t: usize, b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::derive(seed, &[crate::rng::tag("sma-x")]);
        let data: Vec<f64> = (0..t * b * c * h * w).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::from_vec(&[t * b, c, h, w], data).unwrap()
    }

    /// Scalar-loop re-implementation of the whole forward pass (train-mode
    /// batch norm, ReLU encoder). Returns (y, w_alpha, w_beta, z).
    #[allow(clippy::needless_range_loop)]
    fn oracle(
        layer: &SmaLayer,
        store: &ParamStore,
        x: &Tensor,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (t, c) = (layer.timesteps, layer.channels);
        let d = x.dims();
        let (rows, h, w) = (d[0], d[2], d[3]);
        let b = rows / t;
        let n_scales = layer.cfg.scales;
        let plane = h * w;
        let xd = x.data();
        let mut branches: Vec<Vec<f64>> = Vec::new();
        for (n, &k) in layer.cfg.kernel_sizes.iter().enumerate() {
            let kernel = store.get(&layer.name(&format!("enc{}.kernel", n))).unwrap();
            let kd = kernel.data();
            let pad = k / 2;
            let mut conv = vec![0.0; rows * c * plane];
            for r in 0..rows {
                for co in 0..c {
                    for oy in 0..h {
                        for ox in 0..w {
                            let mut s = 0.0;
                            for ci in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = oy as isize + ky as isize - pad as isize;
                                        let ix = ox as isize + kx as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        s += xd[((r * c + ci) * h + iy as usize) * w + ix as usize]
                                            * kd[((co * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                            conv[((r * c + co) * h + oy) * w + ox] = s;
                        }
                    }
                }
            }
            let gamma = store.get(&layer.name(&format!("enc{}.bn.gamma", n))).unwrap();
            let beta = store.get(&layer.name(&format!("enc{}.bn.beta", n))).unwrap();
            let count = (rows * plane) as f64;
            let mut m = vec![0.0; rows * c * plane];
            for ci in 0..c {
                let mut mean = 0.0;
                for r in 0..rows {
                    for p in 0..plane {
                        mean += conv[(r * c + ci) * plane + p];
                    }
                }
                mean /= count;
                let mut var = 0.0;
                for r in 0..rows {
                    for p in 0..plane {
                        let dd = conv[(r * c + ci) * plane + p] - mean;
                        var += dd * dd;
                    }
                }
                var /= count;
                let inv = 1.0 / (var + layer.bn.eps).sqrt();
                for r in 0..rows {
                    for p in 0..plane {
                        let v = (conv[(r * c + ci) * plane + p] - mean) * inv * gamma.data()[ci]
                            + beta.data()[ci];
                        m[(r * c + ci) * plane + p] = v.max(0.0);
                    }
                }
            }
            branches.push(m);
        }
        let mut y = vec![0.0; rows * c * plane];
        for i in 0..y.len() {
            let s: f64 = branches.iter().map(|m| m[i]).sum();
            y[i] = s / n_scales as f64;
        }

        // temporal branch
        let tq = t / layer.cfg.time_reduction;
        let mut pooled_t = vec![0.0; rows]; // index r = t*b
        for r in 0..rows {
            let s: f64 = y[r * c * plane..(r + 1) * c * plane].iter().sum();
            pooled_t[r] = s / (c * plane) as f64;
        }
        let sw = store.get(&layer.name("tmse.squeeze.w")).unwrap();
        let sb = store.get(&layer.name("tmse.squeeze.b")).unwrap();
        let mut w_alpha = vec![0.0; b * n_scales * t];
        for bi in 0..b {
            let mut hidden = vec![0.0; tq];
            for o in 0..tq {
                let mut s = sb.data()[o];
                for ti in 0..t {
                    s += sw.data()[o * t + ti] * pooled_t[ti * b + bi];
                }
                hidden[o] = s.max(0.0);
            }
            let mut logits = vec![0.0; n_scales * t];
            for n in 0..n_scales {
                let ew = store.get(&layer.name(&format!("tmse.exc{}.w", n))).unwrap();
                let eb = store.get(&layer.name(&format!("tmse.exc{}.b", n))).unwrap();
                for o in 0..t {
                    let mut s = eb.data()[o];
                    for q in 0..tq {
                        s += ew.data()[o * tq + q] * hidden[q];
                    }
                    logits[n * t + o] = s;
                }
            }
            for ti in 0..t {
                let mut denom = 0.0;
                for n in 0..n_scales {
                    denom += logits[n * t + ti].exp();
                }
                for n in 0..n_scales {
                    w_alpha[(bi * n_scales + n) * t + ti] = logits[n * t + ti].exp() / denom;
                }
            }
        }

        // channel branch
        let cq = c / layer.cfg.channel_reduction;
        let swc = store.get(&layer.name("cmse.squeeze.w")).unwrap();
        let sbc = store.get(&layer.name("cmse.squeeze.b")).unwrap();
        let mut w_beta = vec![0.0; rows * n_scales * c];
        for r in 0..rows {
            let mut pooled = vec![0.0; c];
            for ci in 0..c {
                let s: f64 = y[(r * c + ci) * plane..(r * c + ci + 1) * plane].iter().sum();
                pooled[ci] = s / plane as f64;
            }
            let mut hidden = vec![0.0; cq];
            for o in 0..cq {
                let mut s = sbc.data()[o];
                for ci in 0..c {
                    s += swc.data()[o * c + ci] * pooled[ci];
                }
                hidden[o] = s.max(0.0);
            }
            let mut logits = vec![0.0; n_scales * c];
            for n in 0..n_scales {
                let ew = store.get(&layer.name(&format!("cmse.exc{}.w", n))).unwrap();
                let eb = store.get(&layer.name(&format!("cmse.exc{}.b", n))).unwrap();
                for o in 0..c {
                    let mut s = eb.data()[o];
                    for q in 0..cq {
                        s += ew.data()[o * cq + q] * hidden[q];
                    }
                    logits[n * c + o] = s;
                }
            }
            for ci in 0..c {
                let mut denom = 0.0;
                for n in 0..n_scales {
                    denom += logits[n * c + ci].exp();
                }
                for n in 0..n_scales {
                    w_beta[(r * n_scales + n) * c + ci] = logits[n * c + ci].exp() / denom;
                }
            }
        }

        let mut z = vec![0.0; rows * c * plane];
        for r in 0..rows {
            let (ti, bi) = (r / b, r % b);
            for ci in 0..c {
                for p in 0..plane {
                    let mut s = 0.0;
                    for n in 0..n_scales {
                        s += branches[n][(r * c + ci) * plane + p]
                            * w_alpha[(bi * n_scales + n) * t + ti]
                            * w_beta[(r * n_scales + n) * c + ci];
                    }
                    z[(r * c + ci) * plane + p] = s;
                }
            }
        }
        (y, w_alpha, w_beta, z)
    }

    fn build_layer(
        t: usize,
        c: usize,
        cfg: SmaConfig,
        seed: u64,
    ) -> (SmaLayer, ParamStore) {
        let layer = SmaLayer::new("sma", cfg, t, c).unwrap();
        let mut store = ParamStore::new();
        layer.init(&mut store, seed).unwrap();
        (layer, store)
    }

    #[test]
    fn config_validation_rejects_bad_scales() {
        assert!(small_cfg(1, &[3], 1, 1).validate().is_err());
        assert!(small_cfg(2, &[3, 3], 1, 1).validate().is_err());
        assert!(small_cfg(2, &[5, 3], 1, 1).validate().is_err());
        assert!(small_cfg(2, &[2, 4], 1, 1).validate().is_err());
        assert!(small_cfg(2, &[1, 3], 1, 1).validate().is_ok());
        assert!(SmaLayer::new("s", small_cfg(2, &[1, 3], 4, 1), 4, 6).is_err());
        assert!(SmaLayer::new("s", small_cfg(2, &[1, 3], 1, 3), 4, 6).is_err());
    }

    #[test]
    fn output_shape_equals_input_shape() {
        let (layer, mut store) = build_layer(4, 2, small_cfg(4, &[1, 3, 5, 7], 2, 4), 1);
        let x = random_input(4, 1, 2, 8, 8, 5);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut binds = Bindings::new();
        let z = layer.forward(&mut g, &mut store, &mut binds, xv, Mode::Train).unwrap();
        assert_eq!(g.value(z).dims(), x.dims());
    }

    #[test]
    fn matches_the_scalar_loop_oracle() {
        for (trial, (t, b, c, h, w)) in [(4usize, 2usize, 4usize, 5usize, 5usize), (2, 1, 2, 3, 4), (6, 1, 4, 4, 4)]
            .into_iter()
            .enumerate()
        {
            let cfg = small_cfg(3, &[1, 3, 5], 2, 2);
            let (layer, mut store) = build_layer(t, c, cfg, trial as u64 + 10);
            let x = random_input(t, b, c, h, w, trial as u64 + 50);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let mut binds = Bindings::new();
            let (z, trace) = layer
                .forward_traced(&mut g, &mut store, &mut binds, xv, Mode::Train)
                .unwrap();
            let (_, wa_o, wb_o, z_o) = oracle(&layer, &store, &x);
            let wa = &trace.w_alpha;
            for (i, &v) in wa.data().iter().enumerate() {
                assert!((v - wa_o[i]).abs() < 1e-10, "w_alpha[{}]: {} vs {}", i, v, wa_o[i]);
            }
            let wb_flat = trace.w_beta.reshape(&[t * b * 3 * c]).unwrap();
            for (i, &v) in wb_flat.data().iter().enumerate() {
                assert!((v - wb_o[i]).abs() < 1e-10, "w_beta[{}]: {} vs {}", i, v, wb_o[i]);
            }
            for (i, &v) in g.value(z).data().iter().enumerate() {
                assert!((v - z_o[i]).abs() < 1e-10, "z[{}]: {} vs {}", i, v, z_o[i]);
            }
        }
    }

    #[test]
    fn scale_softmaxes_are_normalized() {
        let (layer, mut store) = build_layer(4, 4, small_cfg(4, &[1, 3, 5, 7], 4, 4), 3);
        let x = random_input(4, 3, 4, 6, 6, 9);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut binds = Bindings::new();
        let (_, trace) = layer
            .forward_traced(&mut g, &mut store, &mut binds, xv, Mode::Train)
            .unwrap();
        let wa = &trace.w_alpha;
        for bi in 0..3 {
            for ti in 0..4 {
                let s: f64 = (0..4).map(|n| wa.at(&[bi, n, ti])).sum();
                assert!((s - 1.0).abs() < 1e-10, "alpha sum {}", s);
            }
        }
        for ti in 0..4 {
            for bi in 0..3 {
                for ci in 0..4 {
                    let s: f64 = (0..4).map(|n| trace.w_beta.at(&[ti, bi, n, ci])).sum();
                    assert!((s - 1.0).abs() < 1e-10, "beta sum {}", s);
                }
            }
        }
        let imp_sum: f64 = trace.importance.iter().sum();
        assert!((imp_sum - 1.0).abs() < 1e-10, "importance sum {}", imp_sum);
    }

    #[test]
    fn tied_scales_collapse_to_uniform_weights() {
        let (layer, mut store) = build_layer(4, 4, small_cfg(4, &[1, 3, 5, 7], 2, 2), 21);
        // Tie every per-scale tensor to scale 0's values. Kernels of
        // different sizes are tied by zero-padding the 1x1 kernel into the
        // larger ones, which leaves the conv output unchanged.
        let k0 = store.get("sma.enc0.kernel").unwrap().clone();
        for n in 1..4 {
            let kn = 2 * n + 1;
            let mut big = Tensor::zeros(&[4, 4, kn, kn]);
            for co in 0..4 {
                for ci in 0..4 {
                    big.set(&[co, ci, kn / 2, kn / 2], k0.at(&[co, ci, 0, 0]));
                }
            }
            store.set(&format!("sma.enc{}.kernel", n), big).unwrap();
        }
        for branch in ["tmse", "cmse"] {
            let w = store.get(&format!("sma.{}.exc0.w", branch)).unwrap().clone();
            let b = store.get(&format!("sma.{}.exc0.b", branch)).unwrap().clone();
            for n in 1..4 {
                store.set(&format!("sma.{}.exc{}.w", branch, n), w.clone()).unwrap();
                store.set(&format!("sma.{}.exc{}.b", branch, n), b.clone()).unwrap();
            }
        }
        let x = random_input(4, 1, 4, 5, 5, 33);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut binds = Bindings::new();
        let (z, trace) = layer
            .forward_traced(&mut g, &mut store, &mut binds, xv, Mode::Train)
            .unwrap();
        for &v in trace.w_alpha.data() {
            assert_eq!(v, 0.25);
        }
        for &v in trace.w_beta.data() {
            assert_eq!(v, 0.25);
        }
        // With uniform 1/N weights on both branches the recombination is the
        // branch mean scaled by a further 1/N.
        let (y, _, _, z_o) = oracle(&layer, &store, &x);
        for (i, (&zv, &yv)) in g.value(z).data().iter().zip(y.iter()).enumerate() {
            assert!((zv - yv / 4.0).abs() < 1e-12, "z[{}] {} vs y/N {}", i, zv, yv / 4.0);
            assert!((zv - z_o[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_stays_zero_through_the_relu_path() {
        let (layer, mut store) = build_layer(2, 2, small_cfg(2, &[1, 3], 2, 2), 4);
        let x = Tensor::zeros(&[2, 2, 4, 4]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut binds = Bindings::new();
        let z = layer.forward(&mut g, &mut store, &mut binds, xv, Mode::Train).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_parameter_count_matches_the_closed_form() {
        for &(t, c) in &[(16usize, 64usize), (8, 32)] {
            let cfg = small_cfg(4, &[1, 3, 5, 7], 4, 4);
            let (layer, store) = build_layer(t, c, cfg.clone(), 2);
            let mut weights = 0;
            let mut biases = 0;
            for (name, e) in store.iter() {
                if name.contains("tmse") || name.contains("cmse") {
                    if name.ends_with(".w") {
                        weights += e.tensor.numel();
                    } else {
                        biases += e.tensor.numel();
                    }
                }
            }
            let (ew, eb) = decoder_param_counts(t, c, &layer.cfg);
            assert_eq!(weights, ew, "weights at t={} c={}", t, c);
            assert_eq!(biases, eb, "biases at t={} c={}", t, c);
        }
        // Quadrupling the width multiplies channel-decoder weights 16-fold.
        let cfg = small_cfg(4, &[1, 3, 5, 7], 4, 4);
        let n = cfg.scales;
        let w_c = |c: usize| (n + 1) * c * (c / 4);
        assert_eq!(w_c(64), 16 * w_c(16));
    }

    #[test]
    fn full_relu_module_passes_a_gradient_check() {
        let cfg = small_cfg(2, &[1, 3], 2, 2);
        let (layer, store) = build_layer(2, 2, cfg, 8);
        let names: Vec<String> = store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        let mut inputs: Vec<Tensor> = vec![random_input(2, 1, 2, 3, 3, 77)];
        for n in &names {
            inputs.push(store.get(n).unwrap().clone());
        }
        let check = crate::gradcheck::check_gradients(
            |g, vals| {
                let mut st = store.clone();
                let mut binds = Bindings::new();
                for (i, n) in names.iter().enumerate() {
                    binds.preset(n, vals[i + 1]);
                }
                let z = layer.forward(g, &mut st, &mut binds, vals[0], Mode::Train)?;
                let sq = g.mul(z, z)?;
                g.mean_all(sq)
            },
            &inputs,
            crate::gradcheck::CheckCfg {
                coords_per_input: 6,
                ..Default::default()
            },
            &mut crate::rng::derive(91, &[1]),
        )
        .unwrap();
        assert!(check.ok(), "violations: {:?}", check.violations);
    }

    #[test]
    fn lif_encoder_produces_finite_bounded_output() {
        let cfg = SmaConfig {
            encoder_act: EncoderAct::Lif(NeuronConfig::default()),
            ..small_cfg(2, &[1, 3], 2, 2)
        };
        let (layer, mut store) = build_layer(4, 2, cfg, 6);
        let x = random_input(4, 2, 2, 5, 5, 13);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut binds = Bindings::new();
        let z = layer.forward(&mut g, &mut store, &mut binds, xv, Mode::Train).unwrap();
        let zt = g.value(z);
        assert!(zt.is_finite());
        // Binary branch outputs and softmax weights keep z in [0, 1].
        assert!(zt.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn trace_csv_has_the_declared_columns() {
        let (layer, mut store) = build_layer(2, 2, small_cfg(2, &[1, 3], 2, 2), 5);
        let x = random_input(2, 1, 2, 3, 3, 19);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut binds = Bindings::new();
        let (_, trace) = layer
            .forward_traced(&mut g, &mut store, &mut binds, xv, Mode::Eval)
            .unwrap();
        let a = trace.alpha_csv(0);
        assert!(a.starts_with("sample,t,n,w_alpha\n"));
        assert_eq!(a.lines().count(), 1 + 2 * 2);
        let b = trace.beta_csv(3);
        assert!(b.starts_with("sample,t,n,c,w_beta\n"));
        assert_eq!(b.lines().count(), 1 + 2 * 2 * 2);
        assert!(b.lines().nth(1).unwrap().starts_with("3,"));
    }
}
