//! Dense row-major tensors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;

/// A dense n-dimensional array with an optional gradient slot.
///
/// `shape` may be empty (a scalar). `grad` is present iff the tensor was
/// marked with [`Tensor::requires_grad`], and always has the same length as
/// `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                reason: format!("{} elements do not fill the shape", data.len()),
                shape,
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::c(x)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape);
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros([n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::c(z * std)
            })
            .collect();
        Self::new(shape, data)
    }

    /// Samples i.i.d. entries uniform on `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape);
        let data = (0..n).map(|_| T::c(rng.random_range(lo..hi))).collect();
        Self::new(shape, data)
    }

    /// Marks the tensor as a differentiable leaf and allocates a zeroed gradient.
    pub fn requires_grad(mut self) -> Self {
        self.grad = Some(vec![T::zero(); self.data.len()]);
        self
    }

    pub fn is_requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Resets the gradient slot to zeros (no-op for non-differentiable tensors).
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Adds `delta` into the gradient slot.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        let g = self
            .grad
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument("tensor does not require grad".into()))?;
        if g.len() != delta.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: vec![g.len()],
                rhs: vec![delta.len()],
            });
        }
        g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if numel(&shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of extent {d}");
            off = off * d + ix;
        }
        self.data[off]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::c(x.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|&x| U::c(x.as_f64())).collect()),
        }
    }
}

/// Output shape of a trailing-axis-aligned broadcast, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Row-major strides of `shape` aligned to `out` (zero on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Maps every flat index of a broadcast output to the flat index of an operand.
pub(crate) fn broadcast_index_map(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = numel(out);
    let len = numel(shape);
    if shape == out {
        return (0..n).collect();
    }
    // operand is a contiguous suffix of the output shape
    if shape.len() <= out.len() && out[out.len() - shape.len()..] == *shape {
        return (0..n).map(|i| i % len).collect();
    }
    let strides = broadcast_strides(shape, out);
    let mut counter = vec![0usize; out.len()];
    let mut map = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..out.len()).rev() {
            counter[ax] += 1;
            off += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * out[ax];
            counter[ax] = 0;
        }
    }
    map
}
