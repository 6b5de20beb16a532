//! Spiking neural networks with multiscale attention, built on a small
//! f64 reverse-mode autodiff core.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense row-major f64 tensors and shapes
//! - [`graph`]: a define-by-run tape with `backward` (conv, batch norm,
//!   pooling, softmax, elementwise ops, custom spike gradients)
//! - [`gradcheck`]: central-finite-difference checking of graph gradients
//! - [`neuron`]: leaky integrate-and-fire dynamics with surrogate gradients
//! - [`events`]: event streams, frame binning, file formats, a synthetic
//!   gesture generator, augmentation and dataset splitting
//! - [`sma`]: spiking multiscale attention (SMA) modules
//! - [`azo`]: attention-guided zoneout (AZO) regularization
//! - [`model`]: VGG-style and membrane-shortcut ResNet builders, placement
//!   policies, parameter containers
//! - [`train`]: losses, optimizers, the training loop and evaluation
//! - [`cli`]: the `synth` / `train` / `eval` / `ablate` / `analyze` commands
//!
//! Everything is deterministic under a fixed seed; see the README for the
//! wire formats and reproducibility notes.

pub mod azo;
pub mod cli;
pub mod error;
pub mod events;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod neuron;
pub mod params;
pub mod pgm;
pub mod rng;
pub mod sma;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Value};
pub use tensor::{Shape, Tensor};
