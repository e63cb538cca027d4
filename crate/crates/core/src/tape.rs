//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a record
//! holding its inputs and whatever it needs to replay its adjoint. Records
//! are appended in execution order, so the tape is always topologically
//! sorted and [`Tape::backward`] is a single reverse sweep.
//!
//! Values are referenced through [`Var`] handles, which are cheap `Copy`
//! indices tagged with the owning tape's id so that mixing tapes is caught
//! as an error rather than silently reading the wrong record.
//!
//! The tape also keeps a running count of retained activation scalars
//! (every non-parameter value, saved buffer and live intermediate gradient)
//! and its peak, which is what the memory benchmark reports. An optional cap
//! turns the count into a budget: an operation whose output would exceed it
//! fails with [`Error::OutOfMemory`] before allocating.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::tensor::{broadcast_index_map, broadcast_shape, check_shape, numel, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

/// Adjoint of an operation whose forward pass was computed outside the tape.
///
/// `backward` receives the values of the recorded inputs (in order), the
/// forward output and the output gradient, and returns one optional
/// gradient per input with the input's length.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Scalars the op keeps alive for its backward pass, beyond its inputs.
    fn saved_len(&self) -> usize {
        0
    }

    fn backward(&self, inputs: &[&[T]], output: &[T], grad: &[T]) -> Result<Vec<Option<Vec<T>>>>;
}

/// Elementwise unary functions with closed-form derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Silu,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Silu => "silu",
        }
    }

    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Silu => x * sigmoid(x),
        }
    }

    /// dy/dx given input and output.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Unary::Neg => -T::one(),
            Unary::Exp => y,
            Unary::Log => x.recip(),
            Unary::Tanh => T::one() - y * y,
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Softplus => sigmoid(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
        }
    }
}

/// Overflow-safe logistic function.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Overflow-safe `log(1 + exp(x))`, evaluated as `max(x, 0) + log1p(exp(-|x|))`.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Unary(usize, Unary),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    SumAll(usize),
    MeanAxis(usize, usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Reverse(usize, usize),
    SwapAxes(usize, usize, usize),
    BroadcastTo(usize),
    Slice { x: usize, axis: usize, start: usize },
    Softmax(usize),
    RmsNorm { x: usize, scale: usize, inv_rms: Vec<T> },
    Bce { s: usize, labels: Vec<T>, eps: T },
    Custom(Vec<usize>, Box<dyn CustomOp<T>>),
}

impl<T: Real> Op<T> {
    fn saved_len(&self) -> usize {
        match self {
            Op::RmsNorm { inv_rms, .. } => inv_rms.len(),
            Op::Bce { labels, .. } => labels.len(),
            Op::Custom(_, op) => op.saved_len(),
            _ => 0,
        }
    }
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    is_param: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Node<T> {
    fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf)
    }

    /// Scalars charged to the activation count while this node is alive.
    fn charged(&self) -> usize {
        if self.is_param {
            0
        } else {
            self.value.len() + self.op.saved_len()
        }
    }
}

/// Ordered record of executed operations.
pub struct Tape<T: Real = f64> {
    id: u32,
    nodes: Vec<Node<T>>,
    retained: usize,
    peak: usize,
    cap: Option<usize>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn reduce_to<T: Real>(g: &[T], map: &[usize], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (gi, &m) in g.iter().zip(map) {
        out[m] += *gi;
    }
    out
}

/// (outer, extent, inner) decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            retained: 0,
            peak: 0,
            cap: None,
            backward_done: false,
        }
    }

    /// Tape whose retained activation count may not exceed `cap` scalars.
    pub fn with_cap(cap: usize) -> Self {
        let mut t = Self::new();
        t.cap = Some(cap);
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Currently retained activation scalars.
    pub fn retained(&self) -> usize {
        self.retained
    }

    /// Peak retained activation scalars since construction.
    pub fn peak(&self) -> usize {
        self.peak
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        let i = self.index(v)?;
        Ok(&self.nodes[i])
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.shape)
    }

    pub fn value(&self, v: Var) -> Result<&[T]> {
        Ok(&self.node(v)?.value)
    }

    pub fn tensor(&self, v: Var) -> Result<Tensor<T>> {
        let n = self.node(v)?;
        Tensor::new(n.shape.clone(), n.value.clone())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.requires_grad)
    }

    /// Gradient of a differentiable leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Result<Option<&[T]>> {
        Ok(self.node(v)?.grad.as_deref())
    }

    /// Adds the gradient recorded for `v` into `tensor`'s gradient slot.
    pub fn grad_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.grad(v)? {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn charge(&mut self, n: usize) {
        self.retained += n;
        self.peak = self.peak.max(self.retained);
    }

    /// Fails with [`Error::OutOfMemory`] if `n` more scalars would exceed the cap.
    pub fn reserve(&self, n: usize) -> Result<()> {
        if let Some(cap) = self.cap {
            if self.retained + n > cap {
                return Err(Error::OutOfMemory {
                    requested: n,
                    retained: self.retained,
                    cap,
                });
            }
        }
        Ok(())
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if !value.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.op_inputs(&op).iter().any(|&i| self.nodes[i].requires_grad);
        let node = Node {
            shape,
            value,
            op,
            requires_grad,
            is_param: false,
            grad: None,
        };
        self.reserve(node.charged())?;
        self.charge(node.charged());
        self.nodes.push(node);
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Unary(x, _)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::SumAll(x)
            | Op::MeanAxis(x, _)
            | Op::Reshape(x)
            | Op::Reverse(x, _)
            | Op::SwapAxes(x, _, _)
            | Op::BroadcastTo(x)
            | Op::Slice { x, .. }
            | Op::Softmax(x) => vec![*x],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Concat(xs, _) => xs.clone(),
            Op::RmsNorm { x, scale, .. } => vec![*x, *scale],
            Op::Bce { s, .. } => vec![*s],
            Op::Custom(xs, _) => xs.clone(),
        }
    }

    fn push_leaf(&mut self, tensor: &Tensor<T>, requires_grad: bool, is_param: bool) -> Result<Var> {
        if !tensor.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let node = Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            op: Op::Leaf,
            requires_grad,
            is_param,
            grad: None,
        };
        self.reserve(node.charged())?;
        self.charge(node.charged());
        self.nodes.push(node);
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    /// Records an input; differentiable iff the tensor has a gradient slot.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        self.push_leaf(tensor, tensor.is_requires_grad(), false)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        self.push_leaf(tensor, false, false)
    }

    /// Records a trainable parameter. Parameters are differentiable and are
    /// not charged to the activation count.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        self.push_leaf(tensor, true, true)
    }

    pub fn scalar(&mut self, value: T) -> Result<Var> {
        self.constant(&Tensor::scalar(value))
    }

    // ------------------------------------------------------------------
    // elementwise
    // ------------------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        self.reserve(numel(&out))?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let value = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(sa, &out);
            let mb = broadcast_index_map(sb, &out);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Ok((out, value))
    }

    /// Broadcasting sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push("add", shape, value, Op::Add(a.idx, b.idx))
    }

    /// Broadcasting difference.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push("sub", shape, value, Op::Sub(a.idx, b.idx))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push("mul", shape, value, Op::Mul(a.idx, b.idx))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let i = self.index(x)?;
        self.reserve(self.nodes[i].value.len())?;
        let value = self.nodes[i].value.iter().map(|&v| kind.apply(v)).collect();
        let shape = self.nodes[i].shape.clone();
        self.push(kind.name(), shape, value, Op::Unary(i, kind))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let i = self.index(x)?;
        self.reserve(self.nodes[i].value.len())?;
        let value = self.nodes[i].value.iter().map(|&v| v * c).collect();
        let shape = self.nodes[i].shape.clone();
        self.push("scale", shape, value, Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let i = self.index(x)?;
        self.reserve(self.nodes[i].value.len())?;
        let value = self.nodes[i].value.iter().map(|&v| v + c).collect();
        let shape = self.nodes[i].shape.clone();
        self.push("add_scalar", shape, value, Op::AddScalar(i))
    }

    // ------------------------------------------------------------------
    // contractions
    // ------------------------------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// broadcast batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.nodes[ia].shape.clone(), self.nodes[ib].shape.clone());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch = broadcast_shape(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(mismatch)?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        self.reserve(numel(&out_shape))?;
        let ma = broadcast_index_map(&sa[..sa.len() - 2], &batch);
        let mb = broadcast_index_map(&sb[..sb.len() - 2], &batch);
        let mut value = vec![T::zero(); numel(&out_shape)];
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        for (bi, out) in value.chunks_mut(m * n).enumerate() {
            let a_blk = &va[ma[bi] * m * k..(ma[bi] + 1) * m * k];
            let b_blk = &vb[mb[bi] * k * n..(mb[bi] + 1) * k * n];
            T::gemm(m, k, n, a_blk, (k as isize, 1), b_blk, (n as isize, 1), out, T::zero());
        }
        self.push("matmul", out_shape, value, Op::MatMul(ia, ib))
    }

    /// Affine map over the last axis: `x[.., in] W[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.index(x)?, self.index(w)?);
        let ib = b.map(|b| self.index(b)).transpose()?;
        let sx = self.nodes[ix].shape.clone();
        let sw = self.nodes[iw].shape.clone();
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (d_in, d_out) = (sw[0], sw[1]);
        if let Some(ib) = ib {
            if self.nodes[ib].shape != [d_out] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: sw,
                    rhs: self.nodes[ib].shape.clone(),
                });
            }
        }
        let rows = numel(&sx) / d_in;
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = d_out;
        self.reserve(rows * d_out)?;
        let mut value = vec![T::zero(); rows * d_out];
        if let Some(ib) = ib {
            for row in value.chunks_mut(d_out) {
                row.copy_from_slice(&self.nodes[ib].value);
            }
        }
        T::gemm(
            rows,
            d_in,
            d_out,
            &self.nodes[ix].value,
            (d_in as isize, 1),
            &self.nodes[iw].value,
            (d_out as isize, 1),
            &mut value,
            if ib.is_some() { T::one() } else { T::zero() },
        );
        self.push("linear", out_shape, value, Op::Linear { x: ix, w: iw, b: ib })
    }

    // ------------------------------------------------------------------
    // reductions and shape ops
    // ------------------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let i = self.index(x)?;
        let s = self.nodes[i].value.iter().copied().sum();
        self.push("sum_all", Vec::new(), vec![s], Op::SumAll(i))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.len();
        let s = self.sum_all(x)?;
        self.scale(s, T::c(1.0 / n as f64))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.index(x)?;
        let shape = self.nodes[i].shape.clone();
        if axis >= shape.len() {
            return Err(invalid(format!("mean_axis: axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        self.reserve(outer * inner)?;
        let inv = T::c(1.0 / len as f64);
        let v = &self.nodes[i].value;
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut value[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push("mean_axis", out_shape, value, Op::MeanAxis(i, axis))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let i = self.index(x)?;
        let shape = shape.into();
        check_shape(&shape)?;
        if numel(&shape) != self.nodes[i].value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[i].shape.clone(),
                rhs: shape,
            });
        }
        self.reserve(numel(&shape))?;
        let value = self.nodes[i].value.clone();
        self.push("reshape", shape, value, Op::Reshape(i))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = xs.iter().map(|&v| self.index(v)).collect::<Result<_>>()?;
        let first = idx
            .first()
            .map(|&i| self.nodes[i].shape.clone())
            .ok_or_else(|| invalid("concat of zero tensors"))?;
        if axis >= first.len() {
            return Err(invalid(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &i in &idx {
            let s = &self.nodes[i].shape;
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        self.reserve(numel(&out_shape))?;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut value = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &i in &idx {
                let len = self.nodes[i].shape[axis] * inner;
                value.extend_from_slice(&self.nodes[i].value[o * len..(o + 1) * len]);
            }
        }
        self.push("concat", out_shape, value, Op::Concat(idx, axis))
    }

    /// Reverses element order along `axis`.
    pub fn reverse(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.index(x)?;
        let shape = self.nodes[i].shape.clone();
        if axis >= shape.len() {
            return Err(invalid(format!("reverse: axis {axis} out of range for {shape:?}")));
        }
        self.reserve(numel(&shape))?;
        let value = reverse_axis(&self.nodes[i].value, &shape, axis);
        self.push("reverse", shape, value, Op::Reverse(i, axis))
    }

    /// Exchanges two axes (materialized).
    pub fn swap_axes(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let i = self.index(x)?;
        let shape = self.nodes[i].shape.clone();
        if a0 >= shape.len() || a1 >= shape.len() {
            return Err(invalid(format!(
                "swap_axes: axes ({a0}, {a1}) out of range for {shape:?}"
            )));
        }
        self.reserve(numel(&shape))?;
        let (value, out_shape) = swap(&self.nodes[i].value, &shape, a0, a1);
        self.push("swap_axes", out_shape, value, Op::SwapAxes(i, a0, a1))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x)?.len();
        if r < 2 {
            return Err(invalid("transpose needs rank >= 2"));
        }
        self.swap_axes(x, r - 2, r - 1)
    }

    /// Materializes a trailing-axis-aligned broadcast.
    pub fn broadcast_to(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let i = self.index(x)?;
        let shape = shape.into();
        let src = self.nodes[i].shape.clone();
        if broadcast_shape(&src, &shape).as_deref() != Some(&shape[..]) {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: src,
                rhs: shape,
            });
        }
        self.reserve(numel(&shape))?;
        let map = broadcast_index_map(&src, &shape);
        let v = &self.nodes[i].value;
        let value = map.iter().map(|&j| v[j]).collect();
        self.push("broadcast_to", shape, value, Op::BroadcastTo(i))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let i = self.index(x)?;
        let shape = self.nodes[i].shape.clone();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(format!(
                "slice [{start}, {}) on axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.reserve(numel(&out_shape))?;
        let v = &self.nodes[i].value;
        let mut value = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            value.extend_from_slice(&v[base..base + len * inner]);
        }
        self.push("slice", out_shape, value, Op::Slice { x: i, axis, start })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let i = self.index(x)?;
        let shape = self.nodes[i].shape.clone();
        let d = *shape.last().ok_or_else(|| invalid("softmax of a scalar"))?;
        self.reserve(numel(&shape))?;
        let mut value = self.nodes[i].value.clone();
        for row in value.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                z += *r;
            }
            row.iter_mut().for_each(|r| *r /= z);
        }
        self.push("softmax", shape, value, Op::Softmax(i))
    }

    /// Scale-only RMS normalization over the last axis.
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: T) -> Result<Var> {
        let (ix, is) = (self.index(x)?, self.index(scale)?);
        let shape = self.nodes[ix].shape.clone();
        let d = *shape.last().ok_or_else(|| invalid("rms_norm of a scalar"))?;
        if self.nodes[is].shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                lhs: shape,
                rhs: self.nodes[is].shape.clone(),
            });
        }
        let rows = numel(&shape) / d;
        self.reserve(numel(&shape) + rows)?;
        let (v, s) = (&self.nodes[ix].value, &self.nodes[is].value);
        let mut inv_rms = Vec::with_capacity(rows);
        let mut value = Vec::with_capacity(v.len());
        for row in v.chunks(d) {
            let ms = row.iter().map(|&a| a * a).sum::<T>() / T::c(d as f64);
            let r = (ms + eps).sqrt().recip();
            inv_rms.push(r);
            value.extend(row.iter().zip(s).map(|(&a, &g)| a * r * g));
        }
        self.push(
            "rms_norm",
            shape,
            value,
            Op::RmsNorm {
                x: ix,
                scale: is,
                inv_rms,
            },
        )
    }

    /// Mean binary cross-entropy of probabilities `s` against fixed labels,
    /// with `s` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, s: Var, labels: &[T], eps: T) -> Result<Var> {
        let i = self.index(s)?;
        let v = &self.nodes[i].value;
        if v.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                lhs: self.nodes[i].shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        let one = T::one();
        let mut acc = T::zero();
        for (&p, &y) in v.iter().zip(labels) {
            let p = p.max(eps).min(one - eps);
            acc -= y * p.ln() + (one - y) * (one - p).ln();
        }
        let loss = acc / T::c(v.len() as f64);
        self.push(
            "bce",
            Vec::new(),
            vec![loss],
            Op::Bce {
                s: i,
                labels: labels.to_vec(),
                eps,
            },
        )
    }

    /// Records an operation computed outside the tape.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.index(v)).collect::<Result<_>>()?;
        check_shape(&shape)?;
        if numel(&shape) != value.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("custom op produced {} values", value.len()),
            });
        }
        let name = op.name();
        self.push(name, shape, value, Op::Custom(idx, op))
    }

    // ------------------------------------------------------------------
    // reverse sweep
    // ------------------------------------------------------------------

    /// Propagates adjoints from a scalar `loss` to every differentiable leaf.
    ///
    /// Leaves that the loss does not depend on receive zero gradients.
    /// Calling this twice without [`Tape::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.index(loss)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[li].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[li].shape.clone()));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::DetachedLoss);
        }
        self.backward_done = true;
        self.set_grad(li, vec![T::one()]);
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].is_leaf() {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if !self.nodes[i].is_param {
                self.retained -= g.len();
            }
            for (j, gj) in self.adjoint(i, &g)? {
                if self.nodes[j].requires_grad {
                    self.accumulate(j, gj);
                }
            }
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].is_leaf() && self.nodes[i].requires_grad && self.nodes[i].grad.is_none() {
                let n = self.nodes[i].value.len();
                self.set_grad(i, vec![T::zero(); n]);
            }
        }
        Ok(())
    }

    /// Clears all gradients so that [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.take() {
                if !node.is_param {
                    self.retained -= g.len();
                }
            }
        }
        self.backward_done = false;
    }

    fn set_grad(&mut self, i: usize, g: Vec<T>) {
        if !self.nodes[i].is_param {
            self.charge(g.len());
        }
        self.nodes[i].grad = Some(g);
    }

    fn accumulate(&mut self, i: usize, g: Vec<T>) {
        match self.nodes[i].grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => self.set_grad(i, g),
        }
    }

    fn adjoint(&self, i: usize, g: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
        let node = &self.nodes[i];
        let out_shape = &node.shape;
        let val = |j: usize| &self.nodes[j].value;
        let shape = |j: usize| &self.nodes[j].shape;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let ga = if shape(*a) == out_shape {
                    g.to_vec()
                } else {
                    reduce_to(g, &broadcast_index_map(shape(*a), out_shape), val(*a).len())
                };
                let mut gb = if shape(*b) == out_shape {
                    g.to_vec()
                } else {
                    reduce_to(g, &broadcast_index_map(shape(*b), out_shape), val(*b).len())
                };
                if matches!(node.op, Op::Sub(..)) {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let ma = broadcast_index_map(shape(*a), out_shape);
                let mb = broadcast_index_map(shape(*b), out_shape);
                let (va, vb) = (val(*a), val(*b));
                let mut ga = vec![T::zero(); va.len()];
                let mut gb = vec![T::zero(); vb.len()];
                for (k, &gk) in g.iter().enumerate() {
                    ga[ma[k]] += gk * vb[mb[k]];
                    gb[mb[k]] += gk * va[ma[k]];
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Unary(x, kind) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .zip(&node.value)
                    .map(|((&gk, &xk), &yk)| gk * kind.derivative(xk, yk))
                    .collect();
                vec![(*x, gx)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|&gk| gk * *c).collect())],
            Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::MatMul(a, b) => {
                let (sa, sb) = (shape(*a), shape(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = &out_shape[..out_shape.len() - 2];
                let ma = broadcast_index_map(&sa[..sa.len() - 2], batch);
                let mb = broadcast_index_map(&sb[..sb.len() - 2], batch);
                let (va, vb) = (val(*a), val(*b));
                let mut ga = vec![T::zero(); va.len()];
                let mut gb = vec![T::zero(); vb.len()];
                for (bi, gblk) in g.chunks(m * n).enumerate() {
                    let (oa, ob) = (ma[bi] * m * k, mb[bi] * k * n);
                    // dA = G B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        gblk,
                        (n as isize, 1),
                        &vb[ob..ob + k * n],
                        (1, n as isize),
                        &mut ga[oa..oa + m * k],
                        T::one(),
                    );
                    // dB = A^T G
                    T::gemm(
                        k,
                        m,
                        n,
                        &va[oa..oa + m * k],
                        (1, k as isize),
                        gblk,
                        (n as isize, 1),
                        &mut gb[ob..ob + k * n],
                        T::one(),
                    );
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Linear { x, w, b } => {
                let sw = shape(*w);
                let (d_in, d_out) = (sw[0], sw[1]);
                let rows = g.len() / d_out;
                let mut out = Vec::with_capacity(3);
                if self.nodes[*x].requires_grad {
                    let mut gx = vec![T::zero(); rows * d_in];
                    T::gemm(
                        rows,
                        d_out,
                        d_in,
                        g,
                        (d_out as isize, 1),
                        val(*w),
                        (1, d_out as isize),
                        &mut gx,
                        T::zero(),
                    );
                    out.push((*x, gx));
                }
                if self.nodes[*w].requires_grad {
                    let mut gw = vec![T::zero(); d_in * d_out];
                    T::gemm(
                        d_in,
                        rows,
                        d_out,
                        val(*x),
                        (1, d_in as isize),
                        g,
                        (d_out as isize, 1),
                        &mut gw,
                        T::zero(),
                    );
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); d_out];
                    for row in g.chunks(d_out) {
                        gb.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    out.push((*b, gb));
                }
                out
            }
            Op::SumAll(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::MeanAxis(x, axis) => {
                let (outer, len, inner) = split_axis(shape(*x), *axis);
                let inv = T::c(1.0 / len as f64);
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        gx.extend(src.iter().map(|&s| s * inv));
                    }
                }
                vec![(*x, gx)]
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = split_axis(out_shape, *axis);
                let mut grads: Vec<Vec<T>> = xs.iter().map(|&j| Vec::with_capacity(val(j).len())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (slot, &j) in xs.iter().enumerate() {
                        let len = shape(j)[*axis] * inner;
                        grads[slot].extend_from_slice(&g[off..off + len]);
                        off += len;
                    }
                }
                xs.iter().copied().zip(grads).collect()
            }
            Op::Reverse(x, axis) => vec![(*x, reverse_axis(g, out_shape, *axis))],
            Op::SwapAxes(x, a0, a1) => vec![(*x, swap(g, out_shape, *a0, *a1).0)],
            Op::BroadcastTo(x) => {
                let map = broadcast_index_map(shape(*x), out_shape);
                vec![(*x, reduce_to(g, &map, val(*x).len()))]
            }
            Op::Slice { x, axis, start } => {
                let (outer, ext, inner) = split_axis(shape(*x), *axis);
                let len = out_shape[*axis];
                let mut gx = vec![T::zero(); val(*x).len()];
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Softmax(x) => {
                let d = *out_shape.last().unwrap();
                let mut gx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(d).zip(node.value.chunks(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&a, &y)| y * (a - dot)));
                }
                vec![(*x, gx)]
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let d = *out_shape.last().unwrap();
                let (vx, vs) = (val(*x), val(*scale));
                let mut gx = Vec::with_capacity(vx.len());
                let mut gs = vec![T::zero(); d];
                let inv_d = T::c(1.0 / d as f64);
                for ((grow, xrow), &r) in g.chunks(d).zip(vx.chunks(d)).zip(inv_rms) {
                    let mut dot = T::zero();
                    for c in 0..d {
                        let xh = xrow[c] * r;
                        gs[c] += grow[c] * xh;
                        dot += grow[c] * vs[c] * xh;
                    }
                    let mean = dot * inv_d;
                    gx.extend((0..d).map(|c| r * (grow[c] * vs[c] - xrow[c] * r * mean)));
                }
                vec![(*x, gx), (*scale, gs)]
            }
            Op::Bce { s, labels, eps } => {
                let one = T::one();
                let inv_n = T::c(1.0 / labels.len() as f64);
                let gs = val(*s)
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p <= *eps || p >= one - *eps {
                            T::zero()
                        } else {
                            g[0] * inv_n * ((one - y) / (one - p) - y / p)
                        }
                    })
                    .collect();
                vec![(*s, gs)]
            }
            Op::Custom(xs, op) => {
                let inputs: Vec<&[T]> = xs.iter().map(|&j| val(j).as_slice()).collect();
                let grads = op.backward(&inputs, &node.value, g)?;
                if grads.len() != xs.len() {
                    return Err(invalid(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        xs.len()
                    )));
                }
                let mut out = Vec::new();
                for (&j, gj) in xs.iter().zip(grads) {
                    if let Some(gj) = gj {
                        if gj.len() != val(j).len() {
                            return Err(invalid(format!("custom op {} gradient length mismatch", op.name())));
                        }
                        out.push((j, gj));
                    }
                }
                out
            }
        })
    }
}

fn reverse_axis<T: Real>(v: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(v.len());
    for o in 0..outer {
        for l in (0..len).rev() {
            let base = (o * len + l) * inner;
            out.extend_from_slice(&v[base..base + inner]);
        }
    }
    out
}

fn swap<T: Real>(v: &[T], shape: &[usize], a0: usize, a1: usize) -> (Vec<T>, Vec<usize>) {
    let (a0, a1) = (a0.min(a1), a0.max(a1));
    let mut out_shape = shape.to_vec();
    out_shape.swap(a0, a1);
    if a0 == a1 {
        return (v.to_vec(), out_shape);
    }
    // shape = [p, n0, m, n1, q]  ->  [p, n1, m, n0, q]
    let p = numel(&shape[..a0]);
    let n0 = shape[a0];
    let m = numel(&shape[a0 + 1..a1]);
    let n1 = shape[a1];
    let q = numel(&shape[a1 + 1..]);
    let mut out = Vec::with_capacity(v.len());
    for ip in 0..p {
        for i1 in 0..n1 {
            for im in 0..m {
                for i0 in 0..n0 {
                    let src = (((ip * n0 + i0) * m + im) * n1 + i1) * q;
                    out.extend_from_slice(&v[src..src + q]);
                }
            }
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let eye = tape.constant(&Tensor::eye(2).unwrap()).unwrap();
        let b = tape.constant(&t(&[2, 2], &[3., 4., 5., 6.])).unwrap();
        let y = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[3., 4., 5., 6.]);

        let a = tape.constant(&t(&[1, 2], &[1., 2.])).unwrap();
        let b = tape.constant(&t(&[2, 1], &[3., 4.])).unwrap();
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[11.]);

        let z = tape.constant(&Tensor::zeros([3, 2]).unwrap()).unwrap();
        let any = tape.constant(&t(&[2, 2], &[1., -2., 7., 0.5])).unwrap();
        let y = tape.matmul(z, any).unwrap();
        assert!(tape.value(y).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros([2, 3]).unwrap()).unwrap();
        let b = tape.constant(&Tensor::zeros([2, 3]).unwrap()).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        let big = softplus(50.0f64);
        assert!(big.is_finite());
        assert!((big - 50.0).abs() < 1e-15);
        assert!(softplus(1000.0f64).is_finite());
        assert!(softplus(-1000.0f64) >= 0.0);
        for i in -200..200 {
            let x = i as f64 * 0.37;
            assert!(softplus(x) >= x.max(0.0));
        }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(3.0f64.ln()) - 0.75).abs() < 1e-15);
        for i in -50..50 {
            let x = i as f64 * 0.91;
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
        assert_eq!(sigmoid(-1000.0f64), 0.0);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[2], &[1., 2.]).requires_grad()).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().unwrap(), &[2., 4.]);
    }

    #[test]
    fn unused_leaf_gets_zero_grad_and_double_backward_fails() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[2], &[1., 2.]).requires_grad()).unwrap();
        let u = tape.leaf(&t(&[3], &[1., 1., 1.]).requires_grad()).unwrap();
        let loss = tape.sum_all(w).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(u).unwrap().unwrap(), &[0., 0., 0.]);
        assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
        tape.reset_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().unwrap(), &[1., 1.]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[2], &[1., 2.]).requires_grad()).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
        let c = tape.constant(&t(&[2], &[1., 2.])).unwrap();
        let s = tape.sum_all(c).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::DetachedLoss)));
        let mut t2 = Tape::new();
        let foreign = t2.scalar(1.0).unwrap();
        assert!(matches!(tape.value(foreign), Err(Error::ForeignVar)));
    }

    #[test]
    fn shape_laws() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::ones([2, 3]).unwrap()).unwrap();
        let b = tape.constant(&Tensor::ones([2, 5]).unwrap()).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c).unwrap(), &[2, 8]);

        let x = tape.constant(&t(&[2, 1, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let m = tape.mean_axis(x, 1).unwrap();
        assert_eq!(tape.shape(m).unwrap(), &[2, 3]);
        assert_eq!(tape.value(m).unwrap(), tape.value(x).unwrap());

        let z = tape.scalar(0.0).unwrap();
        let s = tape.silu(z).unwrap();
        assert_eq!(tape.value(s).unwrap(), &[0.0]);
    }

    #[test]
    fn swap_axes_round_trip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(&t(&[2, 3, 4], &data)).unwrap();
        let y = tape.swap_axes(x, 0, 2).unwrap();
        assert_eq!(tape.shape(y).unwrap(), &[4, 3, 2]);
        // y[k][j][i] == x[i][j][k]
        let yv = tape.tensor(y).unwrap();
        let xv = tape.tensor(x).unwrap();
        assert_eq!(yv.at(&[3, 1, 0]), xv.at(&[0, 1, 3]));
        let z = tape.swap_axes(y, 0, 2).unwrap();
        assert_eq!(tape.value(z).unwrap(), &data[..]);
    }

    #[test]
    fn activation_cap_refuses_before_allocating() {
        let mut tape = Tape::<f64>::with_cap(100);
        let x = tape.constant(&Tensor::ones([10, 5]).unwrap()).unwrap();
        let y = tape.constant(&Tensor::ones([5, 10]).unwrap()).unwrap();
        // 50 + 50 retained; a 10x10 product would need 100 more
        assert!(matches!(tape.matmul(x, y), Err(Error::OutOfMemory { .. })));
        assert_eq!(tape.retained(), 100);
    }

    #[test]
    fn params_are_not_charged() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(&Tensor::ones([4, 4]).unwrap()).unwrap();
        let x = tape.constant(&Tensor::ones([2, 4]).unwrap()).unwrap();
        let y = tape.linear(x, w, None).unwrap();
        let s = tape.sum_all(y).unwrap();
        assert_eq!(tape.retained(), 8 + 8 + 1);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().unwrap().len(), 16);
    }
}
