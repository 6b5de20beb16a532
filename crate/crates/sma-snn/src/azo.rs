//! Attention ZoneOut: training-time replacement at attention-weak sites.
//!
//! During training the attention weights from an SMA layer rank timesteps
//! and channels. The delta_t = floor(T / rtr) weakest timesteps are
//! selected; within each, the delta_c = floor(C / rcr) weakest channels.
//! Every selected (timestep i, channel j) site with i != 0 has its whole
//! spatial plane replaced by the same channel of the previous timestep,
//! reading the ORIGINAL input (replacements never cascade, even when
//! selected timesteps are adjacent). Gradients flow to the site actually
//! read, so a replaced plane routes its gradient to the predecessor.
//!
//! In eval mode the op is a bit-exact identity and reports nothing.
//!
//! Ranking reduces the scale axis by mean (default) or max; ties pick the
//! lowest index. The first-timestep guard has a configurable reading: by
//! default only time index 0 is protected; the channel-guard variant also
//! exempts channel 0 (time 0 stays protected since it has no predecessor).

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Value};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankReduce {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AzoConfig {
    /// Replacement-time ratio; delta_t = floor(T / rtr).
    pub rtr: f64,
    /// Replacement-channel ratio; delta_c = floor(C / rcr).
    pub rcr: f64,
    /// How the scale axis collapses before ranking.
    pub reduce: RankReduce,
    /// When set, channel 0 is exempt from replacement in addition to
    /// time 0.
    pub channel_guard: bool,
}

impl Default for AzoConfig {
    fn default() -> Self {
        AzoConfig {
            rtr: 4.0,
            rcr: 4.0,
            reduce: RankReduce::Mean,
            channel_guard: false,
        }
    }
}

impl AzoConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rtr", self.rtr), ("rcr", self.rcr)] {
            if !v.is_finite() || v < 1.0 {
                return Err(Error::Config(format!(
                    "AZO {} must be a finite ratio >= 1, got {}",
                    name, v
                )));
            }
        }
        Ok(())
    }

    /// (delta_t, delta_c) for the given extents.
    pub fn deltas(&self, t: usize, c: usize) -> (usize, usize) {
        ((t as f64 / self.rtr).floor() as usize, (c as f64 / self.rcr).floor() as usize)
    }
}

/// What one sample's pass selected and replaced.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AzoReport {
    /// Selected timesteps H, ascending; |H| = delta_t.
    pub selected_t: Vec<usize>,
    /// Selected channels per entry of H, ascending; each |P_i| = delta_c.
    pub selected_c: Vec<Vec<usize>>,
    /// Replacements actually applied (selections at guarded indices are
    /// reported but not counted).
    pub replaced_sites: usize,
}

impl AzoReport {
    /// Rows `sample,t,channels` with channels space-separated.
    pub fn csv_rows(&self, sample_id: usize) -> String {
        let mut out = String::new();
        for (i, &t) in self.selected_t.iter().enumerate() {
            let ch: Vec<String> = self.selected_c[i].iter().map(|c| c.to_string()).collect();
            out.push_str(&format!("{},{},{}\n", sample_id, t, ch.join(" ")));
        }
        out
    }

    pub const CSV_HEADER: &'static str = "sample,t,channels\n";
}

/// Indices of the `k` smallest values; equal values rank by index. The
/// result is ascending.
pub fn smallest_k(vals: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn reduce_scales(reduce: RankReduce, slice: impl Iterator<Item = f64>) -> f64 {
    match reduce {
        RankReduce::Mean => {
            let mut s = 0.0;
            let mut n = 0usize;
            for v in slice {
                s += v;
                n += 1;
            }
            s / n as f64
        }
        RankReduce::Max => slice.fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Rank attention weights and select replacement sites for every sample.
/// `w_alpha` is `[B, N, T]`, `w_beta` `[T, B, N, C]` (an SMA trace).
pub fn plan(w_alpha: &Tensor, w_beta: &Tensor, cfg: &AzoConfig) -> Result<Vec<AzoReport>> {
    cfg.validate()?;
    if w_alpha.rank() != 3 || w_beta.rank() != 4 {
        return Err(Error::Shape(format!(
            "plan expects w_alpha [B, N, T] and w_beta [T, B, N, C], got {} and {}",
            w_alpha.shape(),
            w_beta.shape()
        )));
    }
    let (b, n, t) = (w_alpha.dims()[0], w_alpha.dims()[1], w_alpha.dims()[2]);
    let c = w_beta.dims()[3];
    if w_beta.dims() != [t, b, n, c] {
        return Err(Error::Shape(format!(
            "w_beta shape {} does not match w_alpha {} (expected [{}, {}, {}, C])",
            w_beta.shape(),
            w_alpha.shape(),
            t,
            b,
            n
        )));
    }
    let (dt, dc) = cfg.deltas(t, c);
    let mut reports = Vec::with_capacity(b);
    for bi in 0..b {
        let mut report = AzoReport::default();
        if dt == 0 || dc == 0 {
            reports.push(report);
            continue;
        }
        let time_rank: Vec<f64> = (0..t)
            .map(|ti| reduce_scales(cfg.reduce, (0..n).map(|ni| w_alpha.at(&[bi, ni, ti]))))
            .collect();
        report.selected_t = smallest_k(&time_rank, dt);
        for &ti in &report.selected_t {
            let chan_rank: Vec<f64> = (0..c)
                .map(|ci| reduce_scales(cfg.reduce, (0..n).map(|ni| w_beta.at(&[ti, bi, ni, ci]))))
                .collect();
            let p = smallest_k(&chan_rank, dc);
            if ti != 0 {
                report.replaced_sites += p
                    .iter()
                    .filter(|&&j| !(cfg.channel_guard && j == 0))
                    .count();
            }
            report.selected_c.push(p);
        }
        reports.push(report);
    }
    Ok(reports)
}

fn replacement_map(
    reports: &[AzoReport],
    t: usize,
    b: usize,
    c: usize,
    channel_guard: bool,
) -> Vec<usize> {
    let mut map: Vec<usize> = (0..t * b * c).collect();
    for (bi, report) in reports.iter().enumerate() {
        for (i, &ti) in report.selected_t.iter().enumerate() {
            if ti == 0 {
                continue;
            }
            for &j in &report.selected_c[i] {
                if channel_guard && j == 0 {
                    continue;
                }
                map[(ti * b + bi) * c + j] = ((ti - 1) * b + bi) * c + j;
            }
        }
    }
    map
}

/// Loop reference: copy `z` (`[T*B, C, H, W]`, time outermost) and rewrite
/// each selected plane from the original tensor.
pub fn apply_loop(z: &Tensor, reports: &[AzoReport], cfg: &AzoConfig) -> Result<Tensor> {
    let d = z.dims();
    if z.rank() != 4 {
        return Err(Error::Shape(format!("apply_loop expects rank 4, got {}", z.shape())));
    }
    let b = reports.len();
    if b == 0 || d[0] % b != 0 {
        return Err(Error::Shape(format!(
            "{} reports do not tile leading extent {}",
            b, d[0]
        )));
    }
    let (t, c, plane) = (d[0] / b, d[1], d[2] * d[3]);
    let mut out = z.clone();
    for (bi, report) in reports.iter().enumerate() {
        for (i, &ti) in report.selected_t.iter().enumerate() {
            if ti >= t {
                return Err(Error::Shape(format!(
                    "report selects timestep {} of {}",
                    ti, t
                )));
            }
            if ti == 0 {
                continue;
            }
            for &j in &report.selected_c[i] {
                if j >= c {
                    return Err(Error::Shape(format!("report selects channel {} of {}", j, c)));
                }
                if cfg.channel_guard && j == 0 {
                    continue;
                }
                let dst = ((ti * b + bi) * c + j) * plane;
                let src = (((ti - 1) * b + bi) * c + j) * plane;
                let (head, tail) = out.data_mut().split_at_mut(dst);
                tail[..plane].copy_from_slice(&z.data()[src..src + plane]);
                let _ = head;
            }
        }
    }
    Ok(out)
}

/// Vectorized path: one plane-gather over an identity-plus-overrides index
/// map. Differentiable; replaced planes route gradient to their source.
pub fn apply_graph(
    g: &mut Graph,
    z: Value,
    reports: &[AzoReport],
    cfg: &AzoConfig,
) -> Result<Value> {
    let d = g.value(z).dims().to_vec();
    if d.len() != 4 {
        return Err(Error::Shape(format!(
            "apply_graph expects rank 4, got {}",
            g.value(z).shape()
        )));
    }
    let b = reports.len();
    if b == 0 || d[0] % b != 0 {
        return Err(Error::Shape(format!(
            "{} reports do not tile leading extent {}",
            b, d[0]
        )));
    }
    let (t, c) = (d[0] / b, d[1]);
    let map = replacement_map(reports, t, b, c, cfg.channel_guard);
    g.gather_planes(z, 2, &map)
}

/// Full op: identity in eval mode, rank-select-replace in training.
pub fn azo_forward(
    g: &mut Graph,
    z: Value,
    w_alpha: &Tensor,
    w_beta: &Tensor,
    cfg: &AzoConfig,
    mode: Mode,
) -> Result<(Value, Vec<AzoReport>)> {
    cfg.validate()?;
    if mode == Mode::Eval {
        return Ok((z, Vec::new()));
    }
    let reports = plan(w_alpha, w_beta, cfg)?;
    let out = apply_graph(g, z, &reports, cfg)?;
    Ok((out, reports))
}

/// Run both implementations and compare bitwise.
pub fn loop_vectorized_equal(
    z: &Tensor,
    w_alpha: &Tensor,
    w_beta: &Tensor,
    cfg: &AzoConfig,
) -> Result<bool> {
    let reports = plan(w_alpha, w_beta, cfg)?;
    let by_loop = apply_loop(z, &reports, cfg)?;
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let vectored = apply_graph(&mut g, zv, &reports, cfg)?;
    Ok(g.value(vectored).data() == by_loop.data())
}
