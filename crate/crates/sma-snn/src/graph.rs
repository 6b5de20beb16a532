//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape. Recording an operation executes it
//! immediately; [`Graph::backward`] then walks the tape in reverse creation
//! order, which is always a valid topological order because parents precede
//! children. Node values are immutable once created; gradients live in a
//! parallel buffer and sum over fan-out.
//!
//! Conventions baked in here:
//! - convolution is cross-correlation (no kernel flip), square odd kernels
//! - batch norm normalizes per channel over all leading and spatial
//!   positions, so feeding `[T*B, C, H, W]` pools statistics jointly over
//!   batch and time
//! - max pooling breaks ties toward the lowest flat input index
//! - broadcasting requires equal rank; a mismatched axis is only accepted
//!   when one side has extent 1

use crate::error::{Error, Result};
use crate::neuron::Surrogate;
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use rayon::prelude::*;

/// Train/eval switch shared by batch norm, dropout and zoneout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value {
    id: usize,
}

impl Value {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Batch-norm hyperparameters. `momentum` is the fraction of the old running
/// statistic retained per update: `running = m * running + (1 - m) * batch`.
#[derive(Debug, Clone, Copy)]
pub struct BnCfg {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnCfg {
    fn default() -> Self {
        BnCfg {
            eps: 1e-5,
            momentum: 0.9,
        }
    }
}

enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    /// y = mul * x + add, elementwise.
    AffineScalar {
        x: Value,
        mul: f64,
    },
    Relu(Value),
    /// Heaviside forward (1 at x >= 0), surrogate derivative backward.
    Spike {
        x: Value,
        surrogate: Surrogate,
    },
    /// Surrogate primitive forward, surrogate derivative backward. Used to
    /// validate gradient wiring against finite differences of a smooth net.
    SmoothSpike {
        x: Value,
        surrogate: Surrogate,
    },
    Detach,
    Conv2d {
        x: Value,
        k: Value,
        bias: Option<Value>,
        stride: usize,
        pad: usize,
    },
    Affine {
        x: Value,
        w: Value,
        bias: Option<Value>,
    },
    BatchNorm {
        x: Value,
        gamma: Value,
        beta: Value,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaxPool {
        x: Value,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Value,
        axis: usize,
    },
    LogSoftmax {
        x: Value,
        axis: usize,
    },
    Reduce {
        x: Value,
        axes: Vec<usize>,
        mean: bool,
    },
    Reshape(Value),
    Permute {
        x: Value,
        perm: Vec<usize>,
    },
    Narrow {
        x: Value,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Value>,
        axis: usize,
    },
    Dropout {
        x: Value,
        mask: Vec<f64>,
    },
    /// Output plane i is a copy of input plane `map[i]`; a plane is the
    /// block spanned by the trailing `group_rank` axes. Gradients route to
    /// the source plane and sum over fan-out.
    GatherPlanes {
        x: Value,
        map: Vec<usize>,
        plane: usize,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only autodiff tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Value {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Value {
            id: self.nodes.len() - 1,
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t, false, Op::Leaf)
    }

    /// Leaf that accumulates a gradient during backward.
    pub fn param(&mut self, t: Tensor) -> Value {
        self.push(t, true, Op::Leaf)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    /// `None` before backward or for non-gradient nodes. A parameter that is
    /// disconnected from the loss reports a zero tensor.
    pub fn grad(&self, v: Value) -> Option<Tensor> {
        let node = &self.nodes[v.id];
        if !self.backward_done || !node.requires_grad {
            return None;
        }
        let dims = node.value.dims().to_vec();
        match &self.grads[v.id] {
            Some(g) => Some(Tensor::from_vec(&dims, g.clone()).expect("grad shape")),
            None => Some(Tensor::zeros(&dims)),
        }
    }

    /// Clear gradients so `backward` may run again on the same tape.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn req(&self, v: Value) -> bool {
        self.nodes[v.id].requires_grad
    }

    // ---- elementwise and broadcast ops ----

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = broadcast_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = broadcast_zip(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = broadcast_zip(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    /// Elementwise y = mul * x + add.
    pub fn affine_scalar(&mut self, x: Value, mul: f64, add: f64) -> Value {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| mul * v + add).collect();
        let t = Tensor::from_vec(self.value(x).dims(), data).expect("affine_scalar shape");
        let rg = self.req(x);
        self.push(t, rg, Op::AffineScalar { x, mul })
    }

    pub fn scale(&mut self, x: Value, c: f64) -> Value {
        self.affine_scalar(x, c, 0.0)
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::from_vec(self.value(x).dims(), data).expect("relu shape");
        let rg = self.req(x);
        self.push(t, rg, Op::Relu(x))
    }

    /// Binary threshold: 1.0 where x >= 0, else 0.0. Backward applies the
    /// surrogate derivative at x.
    pub fn spike(&mut self, x: Value, surrogate: Surrogate) -> Value {
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { 1.0 } else { 0.0 })
            .collect();
        let t = Tensor::from_vec(self.value(x).dims(), data).expect("spike shape");
        let rg = self.req(x);
        self.push(t, rg, Op::Spike { x, surrogate })
    }

    /// Smooth stand-in for [`Graph::spike`]: forward evaluates the surrogate
    /// primitive, so forward and backward form a consistent differentiable
    /// function. Useful for finite-difference validation of spiking nets.
    pub fn smooth_spike(&mut self, x: Value, surrogate: Surrogate) -> Value {
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| surrogate.primitive(v))
            .collect();
        let t = Tensor::from_vec(self.value(x).dims(), data).expect("smooth_spike shape");
        let rg = self.req(x);
        self.push(t, rg, Op::SmoothSpike { x, surrogate })
    }

    /// Identity forward, zero backward.
    pub fn detach(&mut self, x: Value) -> Value {
        let t = self.value(x).clone();
        let _ = x;
        self.push(t, false, Op::Detach)
    }

    // ---- dense layers ----

    /// 2-D cross-correlation. `x` is `[N, C_in, H, W]` (or `[C_in, H, W]`,
    /// treated as batch 1), `k` is `[C_out, C_in, kh, kw]` with kh == kw odd,
    /// `bias` is `[C_out]`. Output spatial extent is
    /// `(H + 2*pad - k) / stride + 1`.
    pub fn conv2d(
        &mut self,
        x: Value,
        k: Value,
        bias: Option<Value>,
        stride: usize,
        pad: usize,
    ) -> Result<Value> {
        let unbatched = self.value(x).rank() == 3;
        let xt = self.value(x);
        let kt = self.value(k);
        let (out, _) = conv2d_forward(xt, kt, bias.map(|b| self.value(b)), stride, pad)?;
        let out = if unbatched {
            let d = out.dims().to_vec();
            out.reshape(&[d[1], d[2], d[3]])?
        } else {
            out
        };
        let rg = self.req(x) || self.req(k) || bias.map(|b| self.req(b)).unwrap_or(false);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                x,
                k,
                bias,
                stride,
                pad,
            },
        ))
    }

    /// Fully connected layer: `x [B, I] * w [I, O] + bias [O]`.
    pub fn affine(&mut self, x: Value, w: Value, bias: Option<Value>) -> Result<Value> {
        let xt = self.value(x);
        let wt = self.value(w);
        if xt.rank() != 2 || wt.rank() != 2 {
            return Err(Error::Shape(format!(
                "affine expects rank-2 operands, got x {} w {}",
                xt.shape(),
                wt.shape()
            )));
        }
        let (b, i) = (xt.dims()[0], xt.dims()[1]);
        let (wi, o) = (wt.dims()[0], wt.dims()[1]);
        if i != wi {
            return Err(Error::Shape(format!(
                "affine inner-dim mismatch: x {} vs w {}",
                xt.shape(),
                wt.shape()
            )));
        }
        if let Some(bv) = bias {
            let bt = self.value(bv);
            if bt.dims() != [o] {
                return Err(Error::Shape(format!(
                    "affine bias must be [{}], got {}",
                    o,
                    bt.shape()
                )));
            }
        }
        let mut out = vec![0.0; b * o];
        let xd = xt.data();
        let wd = wt.data();
        for r in 0..b {
            let xrow = &xd[r * i..(r + 1) * i];
            let orow = &mut out[r * o..(r + 1) * o];
            if let Some(bv) = bias {
                orow.copy_from_slice(self.value(bv).data());
            }
            for (ii, &xv) in xrow.iter().enumerate() {
                let wrow = &wd[ii * o..(ii + 1) * o];
                for (oo, &wv) in wrow.iter().enumerate() {
                    orow[oo] += xv * wv;
                }
            }
        }
        let t = Tensor::from_vec(&[b, o], out)?;
        let rg = self.req(x) || self.req(w) || bias.map(|bv| self.req(bv)).unwrap_or(false);
        Ok(self.push(t, rg, Op::Affine { x, w, bias }))
    }

    /// Per-channel batch normalization of `[N, C, H, W]` input. In train
    /// mode statistics come from the batch (biased variance) and the running
    /// buffers are updated in place; in eval mode the running buffers are
    /// used directly. With `[T*B, C, H, W]` input this pools statistics over
    /// batch and time jointly.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        cfg: BnCfg,
        mode: Mode,
    ) -> Result<Value> {
        let xt = self.value(x);
        if xt.rank() != 4 {
            return Err(Error::Shape(format!(
                "batch_norm expects [N, C, H, W], got {}",
                xt.shape()
            )));
        }
        let (n, c, h, w) = dims4(xt);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).dims() != [c] {
                return Err(Error::Shape(format!(
                    "batch_norm {} must be [{}], got {}",
                    name,
                    c,
                    self.value(v).shape()
                )));
            }
        }
        if running_mean.dims() != [c] || running_var.dims() != [c] {
            return Err(Error::Shape(format!(
                "batch_norm running stats must be [{}], got {} and {}",
                c,
                running_mean.shape(),
                running_var.shape()
            )));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                let xd = xt.data();
                for ci in 0..c {
                    let mut s = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for v in &xd[base..base + plane] {
                            s += v;
                        }
                    }
                    let m = s / count;
                    let mut q = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for v in &xd[base..base + plane] {
                            let d = v - m;
                            q += d * d;
                        }
                    }
                    mean[ci] = m;
                    var[ci] = q / count;
                }
                let m = cfg.momentum;
                for ci in 0..c {
                    running_mean.data_mut()[ci] = m * running_mean.data()[ci] + (1.0 - m) * mean[ci];
                    running_var.data_mut()[ci] = m * running_var.data()[ci] + (1.0 - m) * var[ci];
                }
                (mean, var)
            }
            Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
        let xd = xt.data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (m, is, g, b) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                for off in base..base + plane {
                    out[off] = (xd[off] - m) * is * g + b;
                }
            }
        }
        let t = Tensor::from_vec(xt.dims(), out)?;
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            t,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train: mode == Mode::Train,
            },
        ))
    }

    /// Max pooling over `[N, C, H, W]` with a square window. Padding cells
    /// never win; ties go to the lowest flat input index.
    pub fn max_pool(
        &mut self,
        x: Value,
        win: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Value> {
        let xt = self.value(x);
        if xt.rank() != 4 {
            return Err(Error::Shape(format!(
                "max_pool expects [N, C, H, W], got {}",
                xt.shape()
            )));
        }
        if win == 0 || stride == 0 {
            return Err(Error::Config("max_pool window and stride must be >= 1".into()));
        }
        if 2 * pad > win {
            return Err(Error::Config(format!(
                "max_pool padding {} exceeds half the window {}",
                pad, win
            )));
        }
        let (n, c, h, w) = dims4(xt);
        if h + 2 * pad < win || w + 2 * pad < win {
            return Err(Error::Shape(format!(
                "max_pool window {} does not fit input {}",
                win,
                xt.shape()
            )));
        }
        let oh = (h + 2 * pad - win) / stride + 1;
        let ow = (w + 2 * pad - win) / stride + 1;
        let xd = xt.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for nc in 0..n * c {
            let ibase = nc * h * w;
            let obase = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..win {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..win {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = ibase + iy as usize * w + ix as usize;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    argmax[obase + oy * ow + ox] = best_idx;
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let rg = self.req(x);
        Ok(self.push(t, rg, Op::MaxPool { x, argmax }))
    }

    /// Global average pool: mean over the two trailing spatial axes,
    /// keeping them as extent 1.
    pub fn avg_pool_global(&mut self, x: Value) -> Result<Value> {
        let r = self.value(x).rank();
        if r != 4 {
            return Err(Error::Shape(format!(
                "avg_pool_global expects [N, C, H, W], got {}",
                self.value(x).shape()
            )));
        }
        self.mean_axes(x, &[2, 3], true)
    }

    pub fn softmax(&mut self, x: Value, axis: usize) -> Result<Value> {
        let xt = self.value(x);
        if axis >= xt.rank() {
            return Err(Error::Shape(format!(
                "softmax axis {} out of range for {}",
                axis,
                xt.shape()
            )));
        }
        let out = lines_map(xt, axis, |line, out| {
            let m = line.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(line) {
                let e = (v - m).exp();
                *o = e;
                z += e;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        });
        let t = Tensor::from_vec(xt.dims(), out)?;
        let rg = self.req(x);
        Ok(self.push(t, rg, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Value, axis: usize) -> Result<Value> {
        let xt = self.value(x);
        if axis >= xt.rank() {
            return Err(Error::Shape(format!(
                "log_softmax axis {} out of range for {}",
                axis,
                xt.shape()
            )));
        }
        let out = lines_map(xt, axis, |line, out| {
            let m = line.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = line.iter().map(|v| (v - m).exp()).sum();
            let lz = z.ln() + m;
            for (o, &v) in out.iter_mut().zip(line) {
                *o = v - lz;
            }
        });
        let t = Tensor::from_vec(xt.dims(), out)?;
        let rg = self.req(x);
        Ok(self.push(t, rg, Op::LogSoftmax { x, axis }))
    }

    // ---- reductions and shape plumbing ----

    pub fn sum_axes(&mut self, x: Value, axes: &[usize], keep: bool) -> Result<Value> {
        self.reduce(x, axes, keep, false)
    }

    pub fn mean_axes(&mut self, x: Value, axes: &[usize], keep: bool) -> Result<Value> {
        self.reduce(x, axes, keep, true)
    }

    pub fn sum_all(&mut self, x: Value) -> Result<Value> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        let s = self.reduce(x, &axes, false, false)?;
        Ok(s)
    }

    pub fn mean_all(&mut self, x: Value) -> Result<Value> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        let s = self.reduce(x, &axes, false, true)?;
        Ok(s)
    }

    fn reduce(&mut self, x: Value, axes: &[usize], keep: bool, mean: bool) -> Result<Value> {
        let xt = self.value(x);
        let rank = xt.rank();
        let mut mask = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::Shape(format!(
                    "reduce axis {} out of range for {}",
                    a,
                    xt.shape()
                )));
            }
            mask[a] = true;
        }
        let kept_dims: Vec<usize> = xt
            .dims()
            .iter()
            .enumerate()
            .map(|(i, &d)| if mask[i] { 1 } else { d })
            .collect();
        let reduced: usize = xt
            .dims()
            .iter()
            .enumerate()
            .filter(|(i, _)| mask[*i])
            .map(|(_, &d)| d)
            .product();
        let mut out = vec![0.0; kept_dims.iter().product()];
        let strides = xt.shape().strides();
        let out_shape = Shape::new(&kept_dims)?;
        let out_strides = out_shape.strides();
        let mut idx = vec![0usize; rank];
        for &v in xt.data() {
            let mut o = 0;
            for (a, &i) in idx.iter().enumerate() {
                if !mask[a] {
                    o += i * out_strides[a];
                }
            }
            out[o] += v;
            step_index(&mut idx, xt.dims());
        }
        let _ = strides;
        if mean {
            let inv = 1.0 / reduced as f64;
            for v in out.iter_mut() {
                *v *= inv;
            }
        }
        let final_dims: Vec<usize> = if keep {
            kept_dims
        } else {
            let squeezed: Vec<usize> = xt
                .dims()
                .iter()
                .enumerate()
                .filter(|(i, _)| !mask[*i])
                .map(|(_, &d)| d)
                .collect();
            if squeezed.is_empty() {
                vec![1]
            } else {
                squeezed
            }
        };
        let t = Tensor::from_vec(&final_dims, out)?;
        let rg = self.req(x);
        Ok(self.push(
            t,
            rg,
            Op::Reduce {
                x,
                axes: mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect(),
                mean,
            },
        ))
    }

    pub fn reshape(&mut self, x: Value, dims: &[usize]) -> Result<Value> {
        let t = self.value(x).reshape(dims)?;
        let rg = self.req(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Value, perm: &[usize]) -> Result<Value> {
        let t = self.value(x).permute(perm)?;
        let rg = self.req(x);
        Ok(self.push(
            t,
            rg,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Value, axis: usize, start: usize, len: usize) -> Result<Value> {
        let xt = self.value(x);
        if axis >= xt.rank() {
            return Err(Error::Shape(format!(
                "narrow axis {} out of range for {}",
                axis,
                xt.shape()
            )));
        }
        if len == 0 || start + len > xt.dims()[axis] {
            return Err(Error::Shape(format!(
                "narrow [{}, {}) out of range on axis {} of {}",
                start,
                start + len,
                axis,
                xt.shape()
            )));
        }
        let outer: usize = xt.dims()[..axis].iter().product();
        let inner: usize = xt.dims()[axis + 1..].iter().product();
        let d = xt.dims()[axis];
        let mut out = vec![0.0; outer * len * inner];
        let xd = xt.data();
        for ou in 0..outer {
            let src = (ou * d + start) * inner;
            let dst = ou * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
        }
        let mut dims = xt.dims().to_vec();
        dims[axis] = len;
        let t = Tensor::from_vec(&dims, out)?;
        let rg = self.req(x);
        Ok(self.push(t, rg, Op::Narrow { x, axis, start }))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, xs: &[Value], axis: usize) -> Result<Value> {
        if xs.is_empty() {
            return Err(Error::Shape("concat needs at least one input".into()));
        }
        let rank = self.value(xs[0]).rank();
        if axis >= rank {
            return Err(Error::Shape(format!(
                "concat axis {} out of range for rank {}",
                axis, rank
            )));
        }
        let mut dims = self.value(xs[0]).dims().to_vec();
        let mut total = 0usize;
        for &v in xs {
            let vt = self.value(v);
            if vt.rank() != rank {
                return Err(Error::Shape(format!(
                    "concat rank mismatch: {} vs {}",
                    self.value(xs[0]).shape(),
                    vt.shape()
                )));
            }
            for (a, (&da, &db)) in dims.iter().zip(vt.dims()).enumerate() {
                if a != axis && da != db {
                    return Err(Error::Shape(format!(
                        "concat extent mismatch on axis {}: {} vs {}",
                        a,
                        self.value(xs[0]).shape(),
                        vt.shape()
                    )));
                }
            }
            total += vt.dims()[axis];
        }
        dims[axis] = total;
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * total * inner];
        let mut off = 0usize;
        for &v in xs {
            let vt = self.value(v);
            let d = vt.dims()[axis];
            let vd = vt.data();
            for ou in 0..outer {
                let src = ou * d * inner;
                let dst = (ou * total + off) * inner;
                out[dst..dst + d * inner].copy_from_slice(&vd[src..src + d * inner]);
            }
            off += d;
        }
        let t = Tensor::from_vec(&dims, out)?;
        let rg = xs.iter().any(|&v| self.req(v));
        Ok(self.push(
            t,
            rg,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Inverted dropout: keeps each element with probability `1 - p`, scaling
    /// survivors by `1/(1-p)`. The mask is drawn once at record time.
    pub fn dropout<R: Rng>(&mut self, x: Value, p: f64, rng: &mut R) -> Result<Value> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout p must be in [0, 1), got {}", p)));
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let t = Tensor::from_vec(self.value(x).dims(), data)?;
        let rg = self.req(x);
        Ok(self.push(t, rg, Op::Dropout { x, mask }))
    }

    /// Rearrange planes: output plane `i` copies input plane `map[i]`, where
    /// a plane spans the trailing `group_rank` axes. Backward scatter-adds
    /// into the source planes.
    pub fn gather_planes(&mut self, x: Value, group_rank: usize, map: &[usize]) -> Result<Value> {
        let xt = self.value(x);
        let rank = xt.rank();
        if group_rank == 0 || group_rank >= rank {
            return Err(Error::Shape(format!(
                "gather_planes group_rank {} invalid for rank {}",
                group_rank, rank
            )));
        }
        let plane: usize = xt.dims()[rank - group_rank..].iter().product();
        let n_planes = xt.numel() / plane;
        if map.len() != n_planes {
            return Err(Error::Shape(format!(
                "gather_planes map length {} != plane count {}",
                map.len(),
                n_planes
            )));
        }
        if let Some(&bad) = map.iter().find(|&&m| m >= n_planes) {
            return Err(Error::Shape(format!(
                "gather_planes source index {} out of range ({} planes)",
                bad, n_planes
            )));
        }
        let xd = xt.data();
        let mut out = vec![0.0; xd.len()];
        for (i, &src) in map.iter().enumerate() {
            out[i * plane..(i + 1) * plane].copy_from_slice(&xd[src * plane..(src + 1) * plane]);
        }
        let t = Tensor::from_vec(xt.dims(), out)?;
        let rg = self.req(x);
        Ok(self.push(
            t,
            rg,
            Op::GatherPlanes {
                x,
                map: map.to_vec(),
                plane,
            },
        ))
    }

    // ---- backward ----

    /// Reverse sweep from `loss`, which must be scalar (one element).
    /// Calling backward twice without [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss, got shape {}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g);
            self.grads[id] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn accum_into(&mut self, v: Value, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.id].requires_grad {
            return;
        }
        let n = self.nodes[v.id].value.numel();
        let slot = self.grads[v.id].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backprop_node(&mut self, id: usize, g: &[f64]) {
        // The op is cloned out only where cheap; big saved buffers are
        // borrowed through raw indexing to keep one code path per op.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                let gdims = self.nodes[id].value.dims().to_vec();
                for v in [a, b] {
                    let vdims = self.nodes[v.id].value.dims().to_vec();
                    let contrib = reduce_broadcast(g, &gdims, &vdims);
                    self.accum_into(v, |s| add_assign(s, &contrib));
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let gdims = self.nodes[id].value.dims().to_vec();
                let adims = self.nodes[a.id].value.dims().to_vec();
                let ca = reduce_broadcast(g, &gdims, &adims);
                self.accum_into(a, |s| add_assign(s, &ca));
                let bdims = self.nodes[b.id].value.dims().to_vec();
                let cb = reduce_broadcast(g, &gdims, &bdims);
                self.accum_into(b, |s| sub_assign(s, &cb));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let gdims = self.nodes[id].value.dims().to_vec();
                // d/da = g * b broadcast to out, then reduced to a's shape.
                for (dst, other) in [(a, b), (b, a)] {
                    if !self.nodes[dst.id].requires_grad {
                        continue;
                    }
                    let other_t = &self.nodes[other.id].value;
                    let scaled = mul_broadcast_flat(g, &gdims, other_t);
                    let ddims = self.nodes[dst.id].value.dims().to_vec();
                    let contrib = reduce_broadcast(&scaled, &gdims, &ddims);
                    self.accum_into(dst, |s| add_assign(s, &contrib));
                }
            }
            Op::AffineScalar { x, mul } => {
                let (x, mul) = (*x, *mul);
                self.accum_into(x, |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += mul * gi;
                    }
                });
            }
            Op::Relu(x) => {
                let x = *x;
                let xv: Vec<f64> = self.nodes[x.id].value.data().to_vec();
                self.accum_into(x, |s| {
                    for ((si, gi), xi) in s.iter_mut().zip(g).zip(&xv) {
                        if *xi > 0.0 {
                            *si += gi;
                        }
                    }
                });
            }
            Op::Spike { x, surrogate } | Op::SmoothSpike { x, surrogate } => {
                let (x, sur) = (*x, *surrogate);
                let xv: Vec<f64> = self.nodes[x.id].value.data().to_vec();
                self.accum_into(x, |s| {
                    for ((si, gi), xi) in s.iter_mut().zip(g).zip(&xv) {
                        *si += gi * sur.derivative(*xi);
                    }
                });
            }
            Op::Detach => {}
            Op::Conv2d {
                x,
                k,
                bias,
                stride,
                pad,
            } => {
                let (x, k, bias, stride, pad) = (*x, *k, *bias, *stride, *pad);
                let xt = &self.nodes[x.id].value;
                let kt = &self.nodes[k.id].value;
                let (dx, dk, db) = conv2d_backward(
                    xt,
                    kt,
                    g,
                    stride,
                    pad,
                    self.nodes[x.id].requires_grad,
                    self.nodes[k.id].requires_grad,
                    bias.map(|b| self.nodes[b.id].requires_grad).unwrap_or(false),
                );
                if let Some(dx) = dx {
                    self.accum_into(x, |s| add_assign(s, &dx));
                }
                if let Some(dk) = dk {
                    self.accum_into(k, |s| add_assign(s, &dk));
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accum_into(b, |s| add_assign(s, &db));
                }
            }
            Op::Affine { x, w, bias } => {
                let (x, w, bias) = (*x, *w, *bias);
                let (b, i) = {
                    let d = self.nodes[x.id].value.dims();
                    (d[0], d[1])
                };
                let o = self.nodes[w.id].value.dims()[1];
                let dx = if self.nodes[x.id].requires_grad {
                    let wd = self.nodes[w.id].value.data();
                    let mut dx = vec![0.0; b * i];
                    for r in 0..b {
                        let grow = &g[r * o..(r + 1) * o];
                        let dxrow = &mut dx[r * i..(r + 1) * i];
                        for ii in 0..i {
                            let wrow = &wd[ii * o..(ii + 1) * o];
                            let mut acc = 0.0;
                            for (go, wo) in grow.iter().zip(wrow) {
                                acc += go * wo;
                            }
                            dxrow[ii] += acc;
                        }
                    }
                    Some(dx)
                } else {
                    None
                };
                let dw = if self.nodes[w.id].requires_grad {
                    let xd = self.nodes[x.id].value.data();
                    let mut dw = vec![0.0; i * o];
                    for r in 0..b {
                        let grow = &g[r * o..(r + 1) * o];
                        let xrow = &xd[r * i..(r + 1) * i];
                        for (ii, &xv) in xrow.iter().enumerate() {
                            let drow = &mut dw[ii * o..(ii + 1) * o];
                            for (dv, go) in drow.iter_mut().zip(grow) {
                                *dv += xv * go;
                            }
                        }
                    }
                    Some(dw)
                } else {
                    None
                };
                if let Some(dx) = dx {
                    self.accum_into(x, |s| add_assign(s, &dx));
                }
                if let Some(dw) = dw {
                    self.accum_into(w, |s| add_assign(s, &dw));
                }
                if let Some(bv) = bias {
                    if self.nodes[bv.id].requires_grad {
                        let mut db = vec![0.0; o];
                        for r in 0..b {
                            for (dv, go) in db.iter_mut().zip(&g[r * o..(r + 1) * o]) {
                                *dv += go;
                            }
                        }
                        self.accum_into(bv, |s| add_assign(s, &db));
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let xt = &self.nodes[x.id].value;
                let (n, c, h, w) = dims4(xt);
                let plane = h * w;
                let count = (n * plane) as f64;
                let xd = xt.data().to_vec();
                let gd = self.nodes[gamma.id].value.data().to_vec();
                // Per-channel sums of g and g * xhat.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let (m, is) = (mean[ci], inv_std[ci]);
                        for off in base..base + plane {
                            let xh = (xd[off] - m) * is;
                            sum_g[ci] += g[off];
                            sum_gx[ci] += g[off] * xh;
                        }
                    }
                }
                if self.nodes[x.id].requires_grad {
                    let mut dx = vec![0.0; xd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let (m, is, ga) = (mean[ci], inv_std[ci], gd[ci]);
                            if train {
                                let k1 = ga * is / count;
                                for off in base..base + plane {
                                    let xh = (xd[off] - m) * is;
                                    dx[off] +=
                                        k1 * (count * g[off] - sum_g[ci] - xh * sum_gx[ci]);
                                }
                            } else {
                                let k = ga * is;
                                for off in base..base + plane {
                                    dx[off] += k * g[off];
                                }
                            }
                        }
                    }
                    self.accum_into(x, |s| add_assign(s, &dx));
                }
                if self.nodes[gamma.id].requires_grad {
                    self.accum_into(gamma, |s| add_assign(s, &sum_gx));
                }
                if self.nodes[beta.id].requires_grad {
                    self.accum_into(beta, |s| add_assign(s, &sum_g));
                }
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                self.accum_into(x, |s| {
                    for (o, &src) in argmax.iter().enumerate() {
                        s[src] += g[o];
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let yt = &self.nodes[id].value;
                let dx = lines_backward(yt, axis, g, |y, gl, out| {
                    let dot: f64 = y.iter().zip(gl).map(|(yv, gv)| yv * gv).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(gl) {
                        *o = yv * (gv - dot);
                    }
                });
                self.accum_into(x, |s| add_assign(s, &dx));
            }
            Op::LogSoftmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let yt = &self.nodes[id].value;
                let dx = lines_backward(yt, axis, g, |y, gl, out| {
                    let gsum: f64 = gl.iter().sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(gl) {
                        *o = gv - yv.exp() * gsum;
                    }
                });
                self.accum_into(x, |s| add_assign(s, &dx));
            }
            Op::Reduce { x, axes, mean } => {
                let (x, mean) = (*x, *mean);
                let axes = axes.clone();
                let xdims = self.nodes[x.id].value.dims().to_vec();
                let mut mask = vec![false; xdims.len()];
                for &a in &axes {
                    mask[a] = true;
                }
                let reduced: usize = xdims
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask[*i])
                    .map(|(_, &d)| d)
                    .product();
                let scale = if mean { 1.0 / reduced as f64 } else { 1.0 };
                // Broadcast g back over reduced axes.
                let kept_dims: Vec<usize> = xdims
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| if mask[i] { 1 } else { d })
                    .collect();
                let kept_shape = Shape::new(&kept_dims).expect("kept shape");
                let kept_strides = kept_shape.strides();
                let mut dx = vec![0.0; xdims.iter().product()];
                let mut idx = vec![0usize; xdims.len()];
                for slot in dx.iter_mut() {
                    let mut o = 0;
                    for (a, &i) in idx.iter().enumerate() {
                        if !mask[a] {
                            o += i * kept_strides[a];
                        }
                    }
                    *slot = g[o] * scale;
                    step_index(&mut idx, &xdims);
                }
                self.accum_into(x, |s| add_assign(s, &dx));
            }
            Op::Reshape(x) => {
                let x = *x;
                self.accum_into(x, |s| add_assign(s, g));
            }
            Op::Permute { x, perm } => {
                let (x, perm) = (*x, perm.clone());
                // Invert the permutation and push the gradient back.
                let mut inv = vec![0usize; perm.len()];
                for (a, &p) in perm.iter().enumerate() {
                    inv[p] = a;
                }
                let ydims = self.nodes[id].value.dims().to_vec();
                let gt = Tensor::from_vec(&ydims, g.to_vec()).expect("permute grad");
                let back = gt.permute(&inv).expect("permute grad back");
                self.accum_into(x, |s| add_assign(s, back.data()));
            }
            Op::Narrow { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                let xdims = self.nodes[x.id].value.dims().to_vec();
                let ydims = self.nodes[id].value.dims().to_vec();
                let outer: usize = xdims[..axis].iter().product();
                let inner: usize = xdims[axis + 1..].iter().product();
                let (d, len) = (xdims[axis], ydims[axis]);
                self.accum_into(x, |s| {
                    for ou in 0..outer {
                        let dst = (ou * d + start) * inner;
                        let src = ou * len * inner;
                        for off in 0..len * inner {
                            s[dst + off] += g[src + off];
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let xs = xs.clone();
                let axis = *axis;
                let ydims = self.nodes[id].value.dims().to_vec();
                let outer: usize = ydims[..axis].iter().product();
                let inner: usize = ydims[axis + 1..].iter().product();
                let total = ydims[axis];
                let mut off = 0usize;
                for v in xs {
                    let d = self.nodes[v.id].value.dims()[axis];
                    let start = off;
                    self.accum_into(v, |s| {
                        for ou in 0..outer {
                            let src = (ou * total + start) * inner;
                            let dst = ou * d * inner;
                            for k in 0..d * inner {
                                s[dst + k] += g[src + k];
                            }
                        }
                    });
                    off += d;
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                self.accum_into(x, |s| {
                    for ((si, gi), mi) in s.iter_mut().zip(g).zip(&mask) {
                        *si += gi * mi;
                    }
                });
            }
            Op::GatherPlanes { x, map, plane } => {
                let (x, plane) = (*x, *plane);
                let map = map.clone();
                self.accum_into(x, |s| {
                    for (i, &src) in map.iter().enumerate() {
                        let sbase = src * plane;
                        let gbase = i * plane;
                        for k in 0..plane {
                            s[sbase + k] += g[gbase + k];
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let d = t.dims();
    (d[0], d[1], d[2], d[3])
}

/// Same-padding for an odd square kernel: output extent equals input extent
/// at stride 1.
pub fn same_padding(k: usize) -> usize {
    (k - 1) / 2
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

fn step_index(idx: &mut [usize], dims: &[usize]) {
    for a in (0..idx.len()).rev() {
        idx[a] += 1;
        if idx[a] < dims[a] {
            return;
        }
        idx[a] = 0;
    }
}

/// Elementwise combine with equal-rank broadcasting: a mismatched axis is
/// accepted only when one side has extent 1.
fn broadcast_zip(a: &Tensor, b: &Tensor, opname: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.rank() != b.rank() {
        return Err(Error::Shape(format!(
            "{}: rank mismatch {} vs {} (broadcasting requires equal rank)",
            opname,
            a.shape(),
            b.shape()
        )));
    }
    if a.dims() == b.dims() {
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.dims(), data);
    }
    let rank = a.rank();
    let mut out_dims = vec![0usize; rank];
    for i in 0..rank {
        let (da, db) = (a.dims()[i], b.dims()[i]);
        out_dims[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Shape(format!(
                "{}: incompatible shapes {} vs {} on axis {}",
                opname,
                a.shape(),
                b.shape(),
                i
            )));
        };
    }
    let sa = strides_for_broadcast(a.dims(), &out_dims);
    let sb = strides_for_broadcast(b.dims(), &out_dims);
    let n: usize = out_dims.iter().product();
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; rank];
    let (ad, bd) = (a.data(), b.data());
    for slot in out.iter_mut() {
        let mut oa = 0;
        let mut ob = 0;
        for (i, &ix) in idx.iter().enumerate() {
            oa += ix * sa[i];
            ob += ix * sb[i];
        }
        *slot = f(ad[oa], bd[ob]);
        step_index(&mut idx, &out_dims);
    }
    Tensor::from_vec(&out_dims, out)
}

fn strides_for_broadcast(dims: &[usize], out_dims: &[usize]) -> Vec<usize> {
    let shape = Shape(dims.to_vec());
    let natural = shape.strides();
    dims.iter()
        .zip(out_dims)
        .zip(natural)
        .map(|((&d, &od), s)| if d == od { s } else { 0 })
        .collect()
}

/// g (shaped gdims) times `other` broadcast up to gdims; returns flat data.
fn mul_broadcast_flat(g: &[f64], gdims: &[usize], other: &Tensor) -> Vec<f64> {
    if other.dims() == gdims {
        return g.iter().zip(other.data()).map(|(a, b)| a * b).collect();
    }
    let so = strides_for_broadcast(other.dims(), gdims);
    let mut out = vec![0.0; g.len()];
    let mut idx = vec![0usize; gdims.len()];
    let od = other.data();
    for (slot, &gv) in out.iter_mut().zip(g) {
        let mut oo = 0;
        for (i, &ix) in idx.iter().enumerate() {
            oo += ix * so[i];
        }
        *slot = gv * od[oo];
        step_index(&mut idx, gdims);
    }
    out
}

/// Sum `g` (shaped gdims) down to `target` dims (broadcast transpose).
fn reduce_broadcast(g: &[f64], gdims: &[usize], target: &[usize]) -> Vec<f64> {
    if gdims == target {
        return g.to_vec();
    }
    let shape = Shape(target.to_vec());
    let tstrides = shape.strides();
    let mut out = vec![0.0; shape.numel()];
    let mut idx = vec![0usize; gdims.len()];
    for &gv in g {
        let mut o = 0;
        for (i, &ix) in idx.iter().enumerate() {
            if target[i] != 1 {
                o += ix * tstrides[i];
            }
        }
        out[o] += gv;
        step_index(&mut idx, gdims);
    }
    out
}

/// Apply `f` to every 1-D line along `axis`; `f(line, out_line)`.
fn lines_map(t: &Tensor, axis: usize, f: impl Fn(&[f64], &mut [f64])) -> Vec<f64> {
    let dims = t.dims();
    let d = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let data = t.data();
    let mut out = vec![0.0; data.len()];
    let mut line = vec![0.0; d];
    let mut oline = vec![0.0; d];
    for ou in 0..outer {
        for ii in 0..inner {
            for j in 0..d {
                line[j] = data[(ou * d + j) * inner + ii];
            }
            f(&line, &mut oline);
            for j in 0..d {
                out[(ou * d + j) * inner + ii] = oline[j];
            }
        }
    }
    out
}

/// Like `lines_map` but for backward passes over saved outputs:
/// `f(y_line, g_line, dx_line)`.
fn lines_backward(
    y: &Tensor,
    axis: usize,
    g: &[f64],
    f: impl Fn(&[f64], &[f64], &mut [f64]),
) -> Vec<f64> {
    let dims = y.dims();
    let d = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let yd = y.data();
    let mut out = vec![0.0; yd.len()];
    let mut yline = vec![0.0; d];
    let mut gline = vec![0.0; d];
    let mut oline = vec![0.0; d];
    for ou in 0..outer {
        for ii in 0..inner {
            for j in 0..d {
                let off = (ou * d + j) * inner + ii;
                yline[j] = yd[off];
                gline[j] = g[off];
            }
            f(&yline, &gline, &mut oline);
            for j in 0..d {
                out[(ou * d + j) * inner + ii] = oline[j];
            }
        }
    }
    out
}

fn conv2d_check(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if k.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv2d kernel must be [C_out, C_in, kh, kw], got {}",
            k.shape()
        )));
    }
    let (_, kc, kh, kw) = dims4(k);
    if kh != kw {
        return Err(Error::Shape(format!(
            "conv2d kernel must be square, got {}",
            k.shape()
        )));
    }
    if kh % 2 == 0 {
        return Err(Error::Config(format!("conv2d kernel size {} must be odd", kh)));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    let (_, c, h, w) = dims4(x);
    if c != kc {
        return Err(Error::Shape(format!(
            "conv2d input channels {} do not match kernel {} (input {}, kernel {})",
            c,
            kc,
            x.shape(),
            k.shape()
        )));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "conv2d kernel {} does not fit padded input {}",
            k.shape(),
            x.shape()
        )));
    }
    Ok(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

fn conv2d_forward(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, (usize, usize))> {
    let x4;
    let x = if x.rank() == 3 {
        let d = x.dims();
        x4 = x.reshape(&[1, d[0], d[1], d[2]])?;
        &x4
    } else if x.rank() == 4 {
        x
    } else {
        return Err(Error::Shape(format!(
            "conv2d input must be [N, C, H, W] or [C, H, W], got {}",
            x.shape()
        )));
    };
    let (oh, ow) = conv2d_check(x, k, stride, pad)?;
    let (n, c, h, w) = dims4(x);
    let (co, _, kh, kw) = dims4(k);
    if let Some(b) = bias {
        if b.dims() != [co] {
            return Err(Error::Shape(format!(
                "conv2d bias must be [{}], got {}",
                co,
                b.shape()
            )));
        }
    }
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; n * co * oh * ow];
    // Each (n, co) output plane is owned by exactly one task, and its
    // accumulation order over (ci, kh, kw, oh, ow) is fixed, so the result
    // is bit-identical for any thread count.
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(pl, oplane)| {
        let ni = pl / co;
        let coi = pl % co;
        if let Some(b) = bias {
            let bv = b.data()[coi];
            for o in oplane.iter_mut() {
                *o = bv;
            }
        }
        for ci in 0..c {
            let iplane = &xd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = kd[((coi * c + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            // ix = ox + kx - pad must lie in [0, w)
                            let ox_lo = pad.saturating_sub(kx);
                            let ox_hi = match (w + pad).checked_sub(kx) {
                                Some(hi) => hi.min(ow),
                                None => continue,
                            };
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let ibase = ox_lo + kx - pad;
                            let src = &irow[ibase..ibase + (ox_hi - ox_lo)];
                            let dst = &mut orow[ox_lo..ox_hi];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *o += wv * irow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok((Tensor::from_vec(&[n, co, oh, ow], out)?, (oh, ow)))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x_in: &Tensor,
    k: &Tensor,
    g: &[f64],
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dk: bool,
    need_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let x4;
    let x = if x_in.rank() == 3 {
        let d = x_in.dims();
        x4 = x_in.reshape(&[1, d[0], d[1], d[2]]).expect("conv bwd reshape");
        &x4
    } else {
        x_in
    };
    let (n, c, h, w) = dims4(x);
    let (co, _, kh, kw) = dims4(k);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let kd = k.data();

    let dx = if need_dx {
        let mut dx = vec![0.0; n * c * h * w];
        // Parallel over samples: each task owns the dx planes of one sample.
        dx.par_chunks_mut(c * h * w).enumerate().for_each(|(ni, dxs)| {
            for coi in 0..co {
                let gplane = &g[(ni * co + coi) * oh * ow..(ni * co + coi + 1) * oh * ow];
                for ci in 0..c {
                    let dplane = &mut dxs[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = kd[((coi * c + ci) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                let drow =
                                    &mut dplane[iy as usize * w..(iy as usize + 1) * w];
                                if stride == 1 {
                                    let ox_lo = pad.saturating_sub(kx);
                                    let ox_hi = (w + pad - kx).min(ow);
                                    if ox_lo >= ox_hi {
                                        continue;
                                    }
                                    let ibase = ox_lo + kx - pad;
                                    for (j, gv) in grow[ox_lo..ox_hi].iter().enumerate() {
                                        drow[ibase + j] += wv * gv;
                                    }
                                } else {
                                    for (ox, gv) in grow.iter().enumerate() {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix >= 0 && ix < w as isize {
                                            drow[ix as usize] += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(dx)
    } else {
        None
    };

    let dk = if need_dk {
        let mut dk = vec![0.0; co * c * kh * kw];
        // Parallel over output channels: each task owns dk[coi], summing
        // over (n, oh, ow) in fixed order.
        dk.par_chunks_mut(c * kh * kw).enumerate().for_each(|(coi, dks)| {
            for ni in 0..n {
                let gplane = &g[(ni * co + coi) * oh * ow..(ni * co + coi + 1) * oh * ow];
                for ci in 0..c {
                    let iplane = &xd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    let ox_lo = pad.saturating_sub(kx);
                                    let ox_hi = (w + pad - kx).min(ow);
                                    if ox_lo >= ox_hi {
                                        continue;
                                    }
                                    let ibase = ox_lo + kx - pad;
                                    let iv = &irow[ibase..ibase + (ox_hi - ox_lo)];
                                    let gvs = &grow[ox_lo..ox_hi];
                                    for (a, b) in iv.iter().zip(gvs) {
                                        acc += a * b;
                                    }
                                } else {
                                    for (ox, gv) in grow.iter().enumerate() {
                                        let ix =
                                            (ox * stride + kx) as isize - pad as isize;
                                        if ix >= 0 && ix < w as isize {
                                            acc += irow[ix as usize] * gv;
                                        }
                                    }
                                }
                            }
                            dks[(ci * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        });
        Some(dk)
    } else {
        None
    };

    let db = if need_db {
        let mut db = vec![0.0; co];
        for ni in 0..n {
            for (coi, dbv) in db.iter_mut().enumerate() {
                let gplane = &g[(ni * co + coi) * oh * ow..(ni * co + coi + 1) * oh * ow];
                *dbv += gplane.iter().sum::<f64>();
            }
        }
        Some(db)
    } else {
        None
    };

    (dx, dk, db)
}
