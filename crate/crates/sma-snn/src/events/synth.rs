//! Synthetic event-gesture generator.
//!
//! Each class traces a parametric motion (orbital arcs at two radii, axis
//! and diagonal sweeps); events are emitted along the trajectory in temporal
//! order with a position-determined polarity, optionally mixed with uniform
//! background noise. Per-sample variation (center, radius, phase jitter) and
//! all noise come from an RNG derived from (seed, class, sample), so a
//! dataset regenerates byte-identically from its seed.
//!
//! Polarity is a checkerboard over pixel position rather than a function of
//! motion direction. That keeps a trajectory and its time-reversal
//! pixel-identical, which is what makes direction-only class pairs a clean
//! witness for temporal information: binned at T=1 they coincide, at T>=4
//! they separate.

use super::{Event, EventStream};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use rand::Rng;
use std::f64::consts::PI;

/// Parametric trajectory in unit coordinates (x right, y down, both in
/// [0, 1]). `s` runs from 0 to 1 over the sample's duration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionSpec {
    /// Circular arc around (cx, cy). The angle at progress `s` is
    /// `phase - span * s` when `clockwise`, else `phase + span * s`
    /// (clockwise in image coordinates, y pointing down).
    Orbit {
        cx: f64,
        cy: f64,
        radius: f64,
        span: f64,
        phase: f64,
        clockwise: bool,
    },
    /// Straight line from `from` to `to`.
    Sweep { from: (f64, f64), to: (f64, f64) },
}

impl MotionSpec {
    pub fn pos(&self, s: f64) -> (f64, f64) {
        match *self {
            MotionSpec::Orbit {
                cx,
                cy,
                radius,
                span,
                phase,
                clockwise,
            } => {
                let a = if clockwise { phase - span * s } else { phase + span * s };
                (cx + radius * a.cos(), cy + radius * a.sin())
            }
            MotionSpec::Sweep { from, to } => {
                (from.0 + (to.0 - from.0) * s, from.1 + (to.1 - from.1) * s)
            }
        }
    }
}

/// Magnitudes of the per-sample variation applied to a class motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Uniform translation of the whole path, fraction of extent.
    pub center: f64,
    /// Relative radius perturbation (orbits only).
    pub radius: f64,
    /// Phase perturbation in radians (orbits only).
    pub phase: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            center: 0.04,
            radius: 0.08,
            phase: 0.12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub height: u16,
    pub width: u16,
    pub events_per_sample: usize,
    /// Fraction of events that are uniform background noise.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            samples_per_class: 60,
            height: 32,
            width: 32,
            events_per_sample: 1200,
            noise_rate: 0.05,
            seed: 7,
        }
    }
}

/// Default motion for a class index. Six base motions; higher indices reuse
/// them with a deterministically shrunken radius / shifted path. The first
/// two classes are the same 270-degree arc traversed in opposite directions
/// (their angular supports overlap on two thirds of the arc), the third is
/// a small-radius orbit, so kernels of several scales and the temporal
/// order all carry class information.
pub fn class_motion(class: usize) -> MotionSpec {
    let base = class % 6;
    let gen = (class / 6) as f64;
    let shrink = 0.82f64.powf(gen);
    let shift = 0.05 * gen;
    match base {
        0 => MotionSpec::Orbit {
            cx: 0.5,
            cy: 0.5,
            radius: 0.34 * shrink,
            span: 1.5 * PI,
            phase: PI / 2.0,
            clockwise: true,
        },
        1 => MotionSpec::Orbit {
            cx: 0.5,
            cy: 0.5,
            radius: 0.34 * shrink,
            span: 1.5 * PI,
            phase: PI / 2.0,
            clockwise: false,
        },
        2 => MotionSpec::Orbit {
            cx: 0.5,
            cy: 0.5,
            radius: 0.16 * shrink,
            span: 2.0 * PI,
            phase: 0.0,
            clockwise: true,
        },
        3 => MotionSpec::Sweep {
            from: (0.10 + shift, 0.5),
            to: (0.90 - shift, 0.5),
        },
        4 => MotionSpec::Sweep {
            from: (0.5, 0.10 + shift),
            to: (0.5, 0.90 - shift),
        },
        _ => MotionSpec::Sweep {
            from: (0.15 + shift, 0.15 + shift),
            to: (0.85 - shift, 0.85 - shift),
        },
    }
}

fn apply_jitter(spec: &MotionSpec, j: &Jitter, rng: &mut SeededRng) -> MotionSpec {
    let dx = rng.gen_range(-j.center..=j.center);
    let dy = rng.gen_range(-j.center..=j.center);
    match *spec {
        MotionSpec::Orbit {
            cx,
            cy,
            radius,
            span,
            phase,
            clockwise,
        } => {
            let rmul = 1.0 + rng.gen_range(-j.radius..=j.radius);
            let dph = rng.gen_range(-j.phase..=j.phase);
            MotionSpec::Orbit {
                cx: cx + dx,
                cy: cy + dy,
                radius: radius * rmul,
                span,
                phase: phase + dph,
                clockwise,
            }
        }
        MotionSpec::Sweep { from, to } => MotionSpec::Sweep {
            from: (from.0 + dx, from.1 + dy),
            to: (to.0 + dx, to.1 + dy),
        },
    }
}

/// Generate one stream along `spec`. Signal events sit on the rounded
/// trajectory in temporal order; noise events are interleaved at random
/// positions in the sequence.
#[allow(clippy::too_many_arguments)]
pub fn synth_stream(
    spec: &MotionSpec,
    width: u16,
    height: u16,
    label: u16,
    events_per_sample: usize,
    noise_rate: f64,
    jitter: Option<&Jitter>,
    rng: &mut SeededRng,
) -> Result<EventStream> {
    if !(0.0..=0.9).contains(&noise_rate) {
        return Err(Error::Config(format!(
            "noise_rate must lie in [0, 0.9], got {}",
            noise_rate
        )));
    }
    let n_noise = (noise_rate * events_per_sample as f64).round() as usize;
    let n_signal = events_per_sample - n_noise;
    if n_signal < 2 {
        return Err(Error::Config(format!(
            "events_per_sample {} leaves fewer than 2 signal events",
            events_per_sample
        )));
    }
    let spec = match jitter {
        Some(j) => apply_jitter(spec, j, rng),
        None => *spec,
    };
    let (wf, hf) = ((width - 1) as f64, (height - 1) as f64);
    let mut events: Vec<Event> = Vec::with_capacity(events_per_sample);
    for k in 0..n_signal {
        let s = k as f64 / (n_signal - 1) as f64;
        let (fx, fy) = spec.pos(s);
        let x = (fx.clamp(0.0, 1.0) * wf).round() as u16;
        let y = (fy.clamp(0.0, 1.0) * hf).round() as u16;
        let p = ((x + y) & 1) as u8;
        events.push(Event { x, y, p });
    }
    for _ in 0..n_noise {
        let e = Event {
            x: rng.gen_range(0..width),
            y: rng.gen_range(0..height),
            p: rng.gen_range(0..=1u8),
        };
        let slot = rng.gen_range(0..=events.len());
        events.insert(slot, e);
    }
    Ok(EventStream {
        width,
        height,
        label,
        events,
    })
}

/// Generate the full dataset: `classes * samples_per_class` streams in
/// class-major order. Each sample's RNG derives from (seed, class, sample),
/// so regeneration is byte-identical and independent of iteration order.
pub fn synth_gestures(cfg: &SynthConfig) -> Result<Vec<EventStream>> {
    if cfg.classes < 2 {
        return Err(Error::Config(format!(
            "synth_gestures needs at least 2 classes, got {}",
            cfg.classes
        )));
    }
    if cfg.width < 4 || cfg.height < 4 {
        return Err(Error::Config("resolution must be at least 4x4".into()));
    }
    let mut out = Vec::with_capacity(cfg.classes * cfg.samples_per_class);
    let jitter = Jitter::default();
    for class in 0..cfg.classes {
        let spec = class_motion(class);
        for sample in 0..cfg.samples_per_class {
            let mut rng = crate::rng::derive(
                cfg.seed,
                &[crate::rng::tag("synth"), class as u64, sample as u64],
            );
            out.push(synth_stream(
                &spec,
                cfg.width,
                cfg.height,
                class as u16,
                cfg.events_per_sample,
                cfg.noise_rate,
                Some(&jitter),
                &mut rng,
            )?);
        }
    }
    Ok(out)
}
