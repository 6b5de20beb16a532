//! Leaky integrate-and-fire neurons with surrogate gradients.
//!
//! Per-step dynamics, with `H` the hidden (post-reset) membrane carried
//! between steps:
//!
//! ```text
//! U  = H + (1/tau) * (I - (H - u_reset))     charge and leak
//! S  = step(U - u_threshold)                 spike, exactly 0 or 1
//! H' = U * (1 - S)                           hard reset
//! ```
//!
//! The threshold step has no usable derivative, so backward substitutes a
//! configurable surrogate evaluated at `U - u_threshold`; everything else
//! is differentiated exactly, and gradients flow across timesteps through
//! `H` (backpropagation through time).

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::tensor::Tensor;

/// Surrogate derivative used in place of the threshold step's.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surrogate {
    /// derivative alpha / (2 * (1 + (pi*alpha*x/2)^2))
    ATan { alpha: f64 },
    /// derivative 1 inside |x| <= width/2, else 0
    RectWindow { width: f64 },
}

impl Surrogate {
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Surrogate::ATan { alpha } => {
                let q = std::f64::consts::PI * alpha * x / 2.0;
                alpha / (2.0 * (1.0 + q * q))
            }
            Surrogate::RectWindow { width } => {
                if x.abs() <= width / 2.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Antiderivative of [`Surrogate::derivative`], normalized so that it
    /// tends to 0 far below threshold. For ATan this is
    /// (1/pi)*arctan(pi*alpha*x/2) + 1/2; for RectWindow a clamped ramp.
    /// Used as a smooth stand-in for the step when validating gradients.
    pub fn primitive(&self, x: f64) -> f64 {
        match *self {
            Surrogate::ATan { alpha } => {
                (std::f64::consts::PI * alpha * x / 2.0).atan() / std::f64::consts::PI + 0.5
            }
            Surrogate::RectWindow { width } => (x + width / 2.0).clamp(0.0, width),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronConfig {
    pub tau: f64,
    pub u_threshold: f64,
    pub u_reset: f64,
    pub surrogate: Surrogate,
    /// Treat the (1 - S) reset gate as a constant during backward.
    pub detach_reset: bool,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        NeuronConfig {
            tau: 2.0,
            u_threshold: 1.0,
            u_reset: 0.0,
            surrogate: Surrogate::ATan { alpha: 2.0 },
            detach_reset: true,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "neuron tau must be positive and finite, got {}",
                self.tau
            )));
        }
        if !(self.u_threshold > self.u_reset) {
            return Err(Error::Config(format!(
                "neuron u_threshold ({}) must exceed u_reset ({})",
                self.u_threshold, self.u_reset
            )));
        }
        match self.surrogate {
            Surrogate::ATan { alpha } if alpha <= 0.0 => {
                Err(Error::Config(format!("surrogate alpha must be > 0, got {}", alpha)))
            }
            Surrogate::RectWindow { width } if width <= 0.0 => {
                Err(Error::Config(format!("surrogate width must be > 0, got {}", width)))
            }
            _ => Ok(()),
        }
    }
}

/// Whether the threshold is applied exactly (binary spikes) or replaced by
/// the surrogate primitive (smooth output for gradient validation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    Binary,
    Relaxed,
}

/// One LIF step on plain values (no gradients). Returns (U, S, H').
pub fn lif_step_values(cfg: &NeuronConfig, hidden: &Tensor, input: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    if hidden.dims() != input.dims() {
        return Err(Error::Shape(format!(
            "lif_step input {} does not match hidden state {}",
            input.shape(),
            hidden.shape()
        )));
    }
    let inv_tau = 1.0 / cfg.tau;
    let n = input.numel();
    let mut u = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut h = vec![0.0; n];
    for i in 0..n {
        let uv = hidden.data()[i] + inv_tau * (input.data()[i] - (hidden.data()[i] - cfg.u_reset));
        let sv = if uv - cfg.u_threshold >= 0.0 { 1.0 } else { 0.0 };
        u[i] = uv;
        s[i] = sv;
        h[i] = uv * (1.0 - sv);
    }
    Ok((
        Tensor::from_vec(input.dims(), u)?,
        Tensor::from_vec(input.dims(), s)?,
        Tensor::from_vec(input.dims(), h)?,
    ))
}

/// One LIF step on the graph. Returns (spikes, new hidden state).
pub fn lif_step(
    g: &mut Graph,
    cfg: &NeuronConfig,
    hidden: Value,
    input: Value,
    mode: SpikeMode,
) -> Result<(Value, Value)> {
    if g.value(hidden).dims() != g.value(input).dims() {
        return Err(Error::Shape(format!(
            "lif_step input {} does not match hidden state {}",
            g.value(input).shape(),
            g.value(hidden).shape()
        )));
    }
    let inv_tau = 1.0 / cfg.tau;
    // U = (1 - 1/tau) * H + (1/tau) * I + u_reset/tau
    let leak = g.affine_scalar(hidden, 1.0 - inv_tau, cfg.u_reset * inv_tau);
    let drive = g.scale(input, inv_tau);
    let u = g.add(leak, drive)?;
    let centered = g.affine_scalar(u, 1.0, -cfg.u_threshold);
    let s = match mode {
        SpikeMode::Binary => g.spike(centered, cfg.surrogate),
        SpikeMode::Relaxed => g.smooth_spike(centered, cfg.surrogate),
    };
    let gate_src = if cfg.detach_reset { g.detach(s) } else { s };
    let gate = g.affine_scalar(gate_src, -1.0, 1.0);
    let h_next = g.mul(u, gate)?;
    Ok((s, h_next))
}

/// Run a LIF layer over a time-major sequence. `x` has shape
/// `[steps * chunk, ...]` with the step index outermost; the hidden state
/// starts at `u_reset` and is threaded through all steps. Returns the spike
/// sequence in the same layout.
pub fn lif_sequence(
    g: &mut Graph,
    cfg: &NeuronConfig,
    x: Value,
    steps: usize,
    mode: SpikeMode,
) -> Result<Value> {
    cfg.validate()?;
    let dims = g.value(x).dims().to_vec();
    if steps == 0 || dims[0] % steps != 0 {
        return Err(Error::Shape(format!(
            "lif_sequence: leading extent {} not divisible into {} steps",
            dims[0], steps
        )));
    }
    let chunk = dims[0] / steps;
    let mut state_dims = dims.clone();
    state_dims[0] = chunk;
    let mut hidden = g.constant(Tensor::full(&state_dims, cfg.u_reset));
    let mut spikes = Vec::with_capacity(steps);
    for t in 0..steps {
        let i_t = g.narrow(x, 0, t * chunk, chunk)?;
        let (s, h) = lif_step(g, cfg, hidden, i_t, mode)?;
        spikes.push(s);
        hidden = h;
    }
    g.concat(&spikes, 0)
}
