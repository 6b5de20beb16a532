//! Central finite-difference validation of graph gradients.
//!
//! The checker only ever evaluates the forward pass of a freshly built
//! graph, so it is independent of the backward implementation it verifies.
//! A builder closure maps leaf tensors to a scalar loss; the checker runs
//! backward once for the analytic gradients, then re-evaluates the forward
//! at `x ± eps` for sampled coordinates and compares.

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct CheckCfg {
    /// Central-difference step.
    pub eps: f64,
    /// Accepted relative error between analytic and numeric gradients.
    pub rel_tol: f64,
    /// Absolute floor below which differences are ignored.
    pub abs_tol: f64,
    /// Coordinates sampled per input tensor (all coordinates if the tensor
    /// is smaller than this).
    pub coords_per_input: usize,
}

impl Default for CheckCfg {
    fn default() -> Self {
        CheckCfg {
            eps: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
            coords_per_input: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    /// max over checked coordinates of |analytic - numeric| / max(|a|, |n|, 1e-12),
    /// after the absolute floor.
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub violations: Vec<Violation>,
}

impl CheckOutcome {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check gradients of `build` with respect to every tensor in `inputs`.
///
/// `build` must be deterministic: called repeatedly with perturbed copies
/// of the inputs, it has to construct the same computation every time.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor],
    cfg: CheckCfg,
    rng: &mut SeededRng,
) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph, &[Value]) -> Result<Value>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vals: Vec<Value> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vals)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "gradcheck build must return a scalar, got {}",
                g.value(loss).shape()
            )));
        }
        Ok(g.value(loss).data()[0])
    };

    // Analytic pass.
    let mut g = Graph::new();
    let vals: Vec<Value> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vals)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::Graph(format!(
            "gradcheck build must return a scalar, got {}",
            g.value(loss).shape()
        )));
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vals
        .iter()
        .map(|&v| g.grad(v).expect("param gradient"))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut outcome = CheckOutcome {
        max_rel_err: 0.0,
        coords_checked: 0,
        violations: Vec::new(),
    };
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= cfg.coords_per_input {
            (0..n).collect()
        } else {
            let mut picked = Vec::with_capacity(cfg.coords_per_input);
            while picked.len() < cfg.coords_per_input {
                let c = rng.gen_range(0..n);
                if !picked.contains(&c) {
                    picked.push(c);
                }
            }
            picked
        };
        for c in coords {
            let orig = work[ii].data()[c];
            work[ii].data_mut()[c] = orig + cfg.eps;
            let lp = eval(&work)?;
            work[ii].data_mut()[c] = orig - cfg.eps;
            let lm = eval(&work)?;
            work[ii].data_mut()[c] = orig;
            let numeric = (lp - lm) / (2.0 * cfg.eps);
            let a = analytic[ii].data()[c];
            let diff = (a - numeric).abs();
            outcome.coords_checked += 1;
            if diff <= cfg.abs_tol {
                continue;
            }
            let rel = diff / a.abs().max(numeric.abs()).max(1e-12);
            outcome.max_rel_err = outcome.max_rel_err.max(rel);
            if rel > cfg.rel_tol {
                outcome.violations.push(Violation {
                    input: ii,
                    coord: c,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut rng = crate::rng::derive(1, &[1]);
        let out = check_gradients(
            |g, vs| {
                let sq = g.mul(vs[0], vs[0])?;
                g.sum_all(sq)
            },
            &[x],
            CheckCfg::default(),
            &mut rng,
        )
        .unwrap();
        assert!(out.ok(), "violations: {:?}", out.violations);
        assert_eq!(out.coords_checked, 3);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::ones(&[2]);
        let mut rng = crate::rng::derive(1, &[2]);
        let err = check_gradients(|g, vs| Ok(g.relu(vs[0])), &[x], CheckCfg::default(), &mut rng);
        assert!(err.is_err());
    }

    #[test]
    fn chained_ops_pass() {
        let x = Tensor::from_vec(&[2, 4], vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.9, 1.1, -2.3]).unwrap();
        let w = Tensor::from_vec(&[4, 3], (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut rng = crate::rng::derive(1, &[3]);
        let out = check_gradients(
            |g, vs| {
                let y = g.affine(vs[0], vs[1], None)?;
                let r = g.relu(y);
                let s = g.softmax(r, 1)?;
                g.mean_all(s)
            },
            &[x, w],
            CheckCfg::default(),
            &mut rng,
        )
        .unwrap();
        assert!(out.ok(), "violations: {:?}", out.violations);
    }
}
