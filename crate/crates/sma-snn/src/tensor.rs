//! Dense row-major f64 tensors.
//!
//! `Tensor` is a plain value type: shape plus a flat buffer. All math that
//! needs gradients goes through [`crate::graph`]; the helpers here are the
//! ones that are useful on raw values (indexing, reshaping, reductions used
//! by analysis code).

use crate::error::{Error, Result};
use std::fmt;

/// Tensor shape. Every extent is at least 1; rank may be anything from 1 up.
/// Scalars are represented as shape `[1]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Shape("shape must have rank >= 1".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "shape {:?} has a zero extent; every extent must be >= 1",
                dims
            )));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    /// Row-major strides (elements, not bytes).
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.0[i + 1];
        }
        s
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{}", d)?;
        }
        write!(f, "]")
    }
}

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::Shape(format!(
                "shape {} wants {} elements, buffer has {}",
                shape,
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, data)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let shape = Shape::new(dims).expect("zeros: invalid dims");
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(dims: &[usize], v: f64) -> Self {
        let shape = Shape::new(dims).expect("full: invalid dims");
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn ones(dims: &[usize]) -> Self {
        Tensor::full(dims, 1.0)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Shape(vec![1]),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of a multi-index. Panics on rank mismatch; debug-asserts
    /// bounds (hot path for the kernels in `graph`).
    #[inline]
    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.rank(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &d)) in idx.iter().zip(self.dims()).enumerate() {
            debug_assert!(ix < d, "index {} out of bounds at axis {}", ix, i);
            off = off * d + ix;
        }
        off
    }

    #[inline]
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::Shape(format!(
                "reshape {} -> {} changes element count",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Permute axes; moves data into the new row-major order.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        permute_data(self, perm)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Argmax over the flat buffer; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

pub(crate) fn permute_data(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    if perm.len() != rank {
        return Err(Error::Shape(format!(
            "permutation {:?} does not match rank {}",
            perm, rank
        )));
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::Shape(format!("invalid permutation {:?}", perm)));
        }
        seen[p] = true;
    }
    let old_dims = t.dims();
    let new_dims: Vec<usize> = perm.iter().map(|&p| old_dims[p]).collect();
    let old_strides = t.shape().strides();
    let mut out = vec![0.0; t.numel()];
    // Walk the output in row-major order, computing the source offset from
    // the permuted index.
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (a, &i) in idx.iter().enumerate() {
            src += i * old_strides[perm[a]];
        }
        *slot = t.data()[src];
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < new_dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Tensor::from_vec(&new_dims, out)
}
