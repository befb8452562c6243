//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles in
//! execution order, so node inputs always precede the node. [`Tape::backward`]
//! walks the records once in reverse and returns the gradient of every leaf
//! that asked for one. Tapes are single-threaded and meant to live for one
//! training step; the recorded values are shared `Arc`s so parameters are not
//! copied when bound.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, numel, Float, Tensor};

/// Boundary handling for spatial operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Zero,
    Circular,
}

/// Backward rule for a user-registered primitive: `(inputs, output, grad_out)
/// -> grad per input`.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

#[derive(Clone, Copy, Debug)]
struct Spatial {
    stride: usize,
    pad: usize,
    padding: Padding,
}

enum Op<T: Float> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBroadcast(usize, usize),
    MulBroadcast(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    Gelu(usize),
    Matmul(usize, usize),
    Bmm { a: usize, b: usize, trans_b: bool },
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Expand(usize),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    Softmax { input: usize, temperature: T },
    LogSoftmax { input: usize, temperature: T },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T> },
    GroupNorm { x: usize, gain: usize, bias: usize, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: usize, w: usize, bias: Option<usize>, spatial: Spatial },
    Involution { x: usize, kernels: usize, groups: usize, size: usize, spatial: Spatial },
    AvgPool { x: usize, size: usize },
    Custom { name: String, inputs: Vec<usize>, backward: CustomBackward<T> },
}

impl<T: Float> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::MulBroadcast(..) => "mul_broadcast",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Matmul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Expand(..) => "expand",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Softmax { .. } => "softmax_rows",
            Op::LogSoftmax { .. } => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GroupNorm { .. } => "group_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Involution { .. } => "involution2d",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::Custom { name, .. } => name,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBroadcast(a, b)
            | Op::MulBroadcast(a, b)
            | Op::Matmul(a, b)
            | Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Expand(a)
            | Op::Slice { input: a, .. }
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::Softmax { input: a, .. }
            | Op::LogSoftmax { input: a, .. }
            | Op::AvgPool { x: a, .. } => vec![*a],
            Op::Concat(ins, _) => ins.clone(),
            Op::LayerNorm { x, gain, bias, .. } | Op::GroupNorm { x, gain, bias, .. } => {
                vec![*x, *gain, *bias]
            }
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Op::Involution { x, kernels, .. } => vec![*x, *kernels],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Float> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records primitive applications for one forward/backward pass.
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    check_finite: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).field("check_finite", &self.check_finite).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by one backward traversal.
#[derive(Debug)]
pub struct Gradients<T> {
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.by_node.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn tensor<T: Float>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("internal shape bookkeeping")
}

fn zip<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    tensor(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn permute_data<T: Float>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let src = x.data();
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    while out.len() < n {
        for j in 0..inner {
            out.push(src[offset + j * inner_stride]);
        }
        // advance all but the innermost axis
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    tensor(&out_shape, out)
}

fn gelu_parts<T: Float>(x: T) -> (T, T) {
    // tanh approximation: 0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))
    let c = T::of(0.797_884_560_802_865_4);
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

/// Row-wise stabilized softmax of `x / temperature` over the last axis.
pub fn softmax_slice<T: Float>(row: &[T], temperature: T, out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v / temperature));
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v / temperature - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|r| r / stride + 1)
}

/// Source index along one axis, or `None` for a zero-padded tap.
#[inline]
fn tap(pos: isize, len: usize, padding: Padding) -> Option<usize> {
    if pos >= 0 && (pos as usize) < len {
        Some(pos as usize)
    } else {
        match padding {
            Padding::Zero => None,
            Padding::Circular => Some(pos.rem_euclid(len as isize) as usize),
        }
    }
}

/// Output indices `j` in `[j0, j1)` with `0 <= j·stride + off < len`.
fn tap_range(out_len: usize, stride: usize, off: isize, len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = ((len as isize - 1 - off).div_euclid(s) + 1).clamp(0, out_len as isize);
    (lo.min(out_len as isize) as usize, hi.max(lo.min(out_len as isize)) as usize)
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, sp: Spatial, cols: &mut [T]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..g.k {
            for v in 0..g.k {
                let row = ((c * g.k + u) * g.k + v) * ohw;
                for i in 0..g.oh {
                    let y = tap((i * sp.stride + u) as isize - sp.pad as isize, g.h, sp.padding);
                    for j in 0..g.ow {
                        let xx = tap((j * sp.stride + v) as isize - sp.pad as isize, g.w, sp.padding);
                        cols[row + i * g.ow + j] = match (y, xx) {
                            (Some(y), Some(xx)) => plane[y * g.w + xx],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, sp: Spatial, x: &mut [T]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..g.k {
            for v in 0..g.k {
                let row = ((c * g.k + u) * g.k + v) * ohw;
                for i in 0..g.oh {
                    let Some(y) = tap((i * sp.stride + u) as isize - sp.pad as isize, g.h, sp.padding) else {
                        continue;
                    };
                    for j in 0..g.ow {
                        if let Some(xx) = tap((j * sp.stride + v) as isize - sp.pad as isize, g.w, sp.padding) {
                            plane[y * g.w + xx] += cols[row + i * g.ow + j];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Tape<T> {
    /// New tape; finite-value checks follow the build profile.
    pub fn new() -> Self {
        Self::with_finite_checks(cfg!(debug_assertions))
    }

    /// New tape that verifies every primitive's output is finite when
    /// `check` is set.
    pub fn with_finite_checks(check: bool) -> Self {
        Self { nodes: RefCell::new(Vec::new()), check_finite: check }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn push(&self, op: Op<T>, value: Tensor<T>) -> Result<Var<'_, T>> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        let needs_grad = op.inputs().iter().any(|&i| self.needs(i));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    /// Records a leaf. Gradients are produced only for leaves with
    /// `requires_grad` set.
    pub fn leaf(&self, value: impl Into<Arc<Tensor<T>>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: value.into(), op: Op::Leaf, needs_grad: requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn variable(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Records a primitive with a caller-supplied backward rule.
    pub fn custom<'t>(
        &'t self,
        name: &str,
        inputs: &[Var<'t, T>],
        value: Tensor<T>,
        backward: impl Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>> + 'static,
    ) -> Result<Var<'t, T>> {
        self.push(
            Op::Custom {
                name: name.to_string(),
                inputs: inputs.iter().map(|v| v.id).collect(),
                backward: Box::new(backward),
            },
            value,
        )
    }

    /// Propagates d(loss)/d(leaf) to every gradient-requiring leaf reachable
    /// from `loss`. Gradients from multiple uses of a tensor accumulate.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.needs_grad {
            return Err(Error::Contract("loss does not depend on any gradient-requiring leaf".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        let mut out = Gradients { by_node: HashMap::new() };
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.by_node.insert(id, g);
                continue;
            }
            for (input, gi) in backward_rule(&nodes, node, &g) {
                if !nodes[input].needs_grad {
                    continue;
                }
                debug_assert_eq!(gi.shape(), nodes[input].value.shape(), "{}", node.op.name());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(out)
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::Shape { op, lhs: a, rhs: b });
        }
        Ok(())
    }

    fn binary(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T, mk: fn(usize, usize) -> Op<T>) -> Result<Self> {
        self.same_shape(other, op)?;
        let v = zip(&self.value(), &other.value(), f);
        self.tape.push(mk(self.id, other.id), v)
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Result<Self> {
        let v = self.value().map(f);
        self.tape.push(op, v)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    fn broadcast(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T, mk: fn(usize, usize) -> Op<T>) -> Result<Self> {
        let (a, b) = (self.shape(), other.shape());
        if b.len() > a.len() || a[a.len() - b.len()..] != b[..] {
            return Err(Error::Shape { op, lhs: a, rhs: b });
        }
        let (x, y) = (self.value(), other.value());
        let inner = y.numel();
        let data = x
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(y.data()).map(|(&p, &q)| f(p, q)))
            .collect();
        self.tape.push(mk(self.id, other.id), tensor(&a, data))
    }

    /// `self + other` where `other`'s shape is a trailing suffix of `self`'s.
    pub fn add_broadcast(&self, other: &Self) -> Result<Self> {
        self.broadcast(other, "add_broadcast", |a, b| a + b, Op::AddBroadcast)
    }

    /// `self ⊙ other` where `other`'s shape is a trailing suffix of `self`'s.
    pub fn mul_broadcast(&self, other: &Self) -> Result<Self> {
        self.broadcast(other, "mul_broadcast", |a, b| a * b, Op::MulBroadcast)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn neg(&self) -> Result<Self> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, s: T) -> Result<Self> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary(Op::Exp(self.id), |x| x.exp())
    }

    pub fn log(&self) -> Result<Self> {
        self.unary(Op::Log(self.id), |x| x.ln())
    }

    pub fn sqrt(&self) -> Result<Self> {
        self.unary(Op::Sqrt(self.id), |x| x.sqrt())
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(Op::Relu(self.id), |x| if x > T::zero() { x } else { T::zero() })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Self> {
        self.unary(Op::Gelu(self.id), |x| gelu_parts(x).0)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::Shape { op: "matmul", lhs: a, rhs: b });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value().data(), other.value().data(), &mut out, m, k, n, false, false, false);
        self.tape.push(Op::Matmul(self.id, other.id), tensor(&[m, n], out))
    }

    /// Batched product over the leading axis: `[g,m,k]·[g,k,n]`, or
    /// `[g,m,k]·[g,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&self, other: &Self, trans_b: bool) -> Result<Self> {
        let (a, b) = (self.shape(), other.shape());
        let ok = a.len() == 3 && b.len() == 3 && a[0] == b[0] && if trans_b { a[2] == b[2] } else { a[2] == b[1] };
        if !ok {
            return Err(Error::Shape { op: "bmm", lhs: a, rhs: b });
        }
        let (g, m, k) = (a[0], a[1], a[2]);
        let n = if trans_b { b[1] } else { b[2] };
        let (x, y) = (self.value(), other.value());
        let mut out = vec![T::zero(); g * m * n];
        for i in 0..g {
            matmul_into(
                &x.data()[i * m * k..(i + 1) * m * k],
                &y.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
                trans_b,
                false,
            );
        }
        self.tape.push(Op::Bmm { a: self.id, b: other.id, trans_b }, tensor(&[g, m, n], out))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len() && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Shape { op: "permute", lhs: shape, rhs: perm.to_vec() });
        }
        let v = permute_data(&self.value(), perm);
        self.tape.push(Op::Permute(self.id, perm.to_vec()), v)
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Self> {
        self.permute(&[1, 0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let v = (*self.value()).clone().reshape(shape)?;
        self.tape.push(Op::Reshape(self.id), v)
    }

    /// Repeats the tensor along a new leading axis of length `n`.
    pub fn expand(&self, n: usize) -> Result<Self> {
        let x = self.value();
        let mut shape = vec![n];
        shape.extend_from_slice(x.shape());
        let data = (0..n).flat_map(|_| x.data().iter().copied()).collect();
        self.tape.push(Op::Expand(self.id), tensor(&shape, data))
    }

    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::Shape { op: "concat", lhs: base, rhs: vec![axis] });
        }
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape { op: "concat", lhs: base, rhs: s });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        tape.push(Op::Concat(parts.iter().map(|p| p.id).collect(), axis), tensor(&shape, data))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape { op: "slice", lhs: shape, rhs: vec![axis, start, len] });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.tape.push(Op::Slice { input: self.id, axis, start }, tensor(&out_shape, data))
    }

    pub fn sum(&self) -> Result<Self> {
        let v = self.value().sum();
        self.tape.push(Op::Sum(self.id), Tensor::scalar(v))
    }

    pub fn mean(&self) -> Result<Self> {
        let x = self.value();
        let v = x.sum() / T::of(x.numel() as f64);
        self.tape.push(Op::Mean(self.id), Tensor::scalar(v))
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape { op: "sum_axis", lhs: shape, rhs: vec![axis] });
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        if mean {
            let s = T::one() / T::of(dim as f64);
            data.iter_mut().for_each(|v| *v *= s);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let op = if mean { Op::MeanAxis(self.id, axis) } else { Op::SumAxis(self.id, axis) };
        self.tape.push(op, tensor(&out_shape, data))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        self.reduce_axis(axis, false)
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        self.reduce_axis(axis, true)
    }

    fn check_temperature(temperature: T) -> Result<()> {
        if temperature.is_nan() || temperature <= T::zero() {
            return Err(Error::Parameter(format!("softmax temperature must be positive, got {temperature}")));
        }
        Ok(())
    }

    /// Softmax of `x / temperature` along the last axis, stabilized by
    /// subtracting the row maximum.
    pub fn softmax_rows(&self, temperature: T) -> Result<Self> {
        Self::check_temperature(temperature)?;
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        let mut out = vec![T::zero(); x.numel()];
        for (row, o) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_slice(row, temperature, o);
        }
        self.tape.push(Op::Softmax { input: self.id, temperature }, tensor(x.shape(), out))
    }

    /// `log softmax(x / temperature)` along the last axis via log-sum-exp.
    pub fn log_softmax_rows(&self, temperature: T) -> Result<Self> {
        Self::check_temperature(temperature)?;
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| Error::Contract("log_softmax of a scalar".into()))?;
        let mut out = vec![T::zero(); x.numel()];
        for (row, o) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v / temperature));
            let lse = row.iter().map(|&v| (v / temperature - max).exp()).sum::<T>().ln() + max;
            for (o, &v) in o.iter_mut().zip(row) {
                *o = v / temperature - lse;
            }
        }
        self.tape.push(Op::LogSoftmax { input: self.id, temperature }, tensor(x.shape(), out))
    }

    /// Normalizes each row over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        let shape = self.shape();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 || gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Shape { op: "layer_norm", lhs: shape, rhs: gain.shape() });
        }
        let x = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        let rows = x.numel() / d;
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.tape.push(Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, rstd }, tensor(&shape, out))
    }

    /// Group normalization of `[B,C,H,W]` with per-channel affine.
    pub fn group_norm(&self, groups: usize, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        let shape = self.shape();
        if shape.len() != 4 || groups == 0 || shape[1] % groups != 0 {
            return Err(Error::Shape { op: "group_norm", lhs: shape, rhs: vec![groups] });
        }
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(Error::Shape { op: "group_norm", lhs: shape, rhs: gain.shape() });
        }
        let x = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        let cg = c / groups;
        let block = cg * hw;
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); b * groups];
        let mut out = vec![T::zero(); x.numel()];
        let inv = T::one() / T::of(block as f64);
        for n in 0..b * groups {
            let src = &x.data()[n * block..(n + 1) * block];
            let mean = src.iter().copied().sum::<T>() * inv;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
            let s = T::one() / (var + eps).sqrt();
            rstd[n] = s;
            let g0 = (n % groups) * cg;
            for (i, &v) in src.iter().enumerate() {
                let ch = g0 + i / hw;
                let h = (v - mean) * s;
                xhat[n * block + i] = h;
                out[n * block + i] = h * gv.data()[ch] + bv.data()[ch];
            }
        }
        self.tape.push(
            Op::GroupNorm { x: self.id, gain: gain.id, bias: bias.id, groups, xhat, rstd },
            tensor(&shape, out),
        )
    }

    /// Cross-correlation of `[B,Cin,H,W]` with `[Cout,Cin,K,K]` weights.
    pub fn conv2d(&self, weight: &Self, bias: Option<&Self>, stride: usize, pad: usize, padding: Padding) -> Result<Self> {
        let (xs, ws) = (self.shape(), weight.shape());
        let geom_ok = xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1] && ws[2] == ws[3] && stride > 0;
        if !geom_ok {
            return Err(Error::Shape { op: "conv2d", lhs: xs, rhs: ws });
        }
        let k = ws[2];
        let (Some(oh), Some(ow)) = (conv_out(xs[2], k, stride, pad), conv_out(xs[3], k, stride, pad)) else {
            return Err(Error::Shape { op: "conv2d", lhs: xs, rhs: ws });
        };
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(Error::Shape { op: "conv2d", lhs: ws, rhs: b.shape() });
            }
        }
        let g = ConvGeom { batch: xs[0], cin: xs[1], h: xs[2], w: xs[3], cout: ws[0], k, oh, ow };
        let sp = Spatial { stride, pad, padding };
        let (x, w) = (self.value(), weight.value());
        let bv = bias.map(|b| b.value());
        let ckk = g.cin * k * k;
        let ohw = oh * ow;
        let mut cols = vec![T::zero(); ckk * ohw];
        let mut out = vec![T::zero(); g.batch * g.cout * ohw];
        let in_len = g.cin * g.h * g.w;
        for n in 0..g.batch {
            im2col(&x.data()[n * in_len..(n + 1) * in_len], &g, sp, &mut cols);
            let dst = &mut out[n * g.cout * ohw..(n + 1) * g.cout * ohw];
            matmul_into(w.data(), &cols, dst, g.cout, ckk, ohw, false, false, false);
            if let Some(bv) = &bv {
                for (co, plane) in dst.chunks_mut(ohw).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv.data()[co]);
                }
            }
        }
        let op = Op::Conv2d { x: self.id, w: weight.id, bias: bias.map(|b| b.id), spatial: sp };
        self.tape.push(op, tensor(&[g.batch, g.cout, oh, ow], out))
    }

    /// Involution aggregation: every output position `(i,j)` mixes the
    /// `size×size` neighbourhood of each channel with the kernel generated
    /// for that position, one kernel per channel group.
    ///
    /// `kernels` is `[B, groups·size², H', W']` laid out group-major, then
    /// kernel row, then kernel column.
    pub fn involution(&self, kernels: &Self, groups: usize, size: usize, stride: usize, padding: Padding) -> Result<Self> {
        let (xs, ks) = (self.shape(), kernels.shape());
        if xs.len() != 4 || ks.len() != 4 || groups == 0 || xs[1] % groups != 0 || size % 2 == 0 || stride == 0 {
            return Err(Error::Shape { op: "involution2d", lhs: xs, rhs: ks });
        }
        let pad = size / 2;
        let (oh, ow) = (conv_out(xs[2], size, stride, pad).unwrap(), conv_out(xs[3], size, stride, pad).unwrap());
        if ks != [xs[0], groups * size * size, oh, ow] {
            return Err(Error::Shape { op: "involution2d", lhs: xs, rhs: ks });
        }
        let sp = Spatial { stride, pad, padding };
        let (x, kv) = (self.value(), kernels.value());
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let cg = c / groups;
        let ohw = oh * ow;
        let mut out = vec![T::zero(); b * c * ohw];
        for n in 0..b {
            for ch in 0..c {
                let grp = ch / cg;
                let plane = &x.data()[(n * c + ch) * h * w..(n * c + ch + 1) * h * w];
                let dst = &mut out[(n * c + ch) * ohw..(n * c + ch + 1) * ohw];
                for u in 0..size {
                    for v in 0..size {
                        let kbase = ((n * groups + grp) * size * size + u * size + v) * ohw;
                        let kslice = &kv.data()[kbase..kbase + ohw];
                        let off = v as isize - pad as isize;
                        let (j0, j1) = tap_range(ow, stride, off, w);
                        for i in 0..oh {
                            let Some(y) = tap((i * stride + u) as isize - pad as isize, h, sp.padding) else { continue };
                            let (d, k, row) = (&mut dst[i * ow..(i + 1) * ow], &kslice[i * ow..(i + 1) * ow], &plane[y * w..(y + 1) * w]);
                            if stride == 1 && j1 > j0 {
                                let s0 = (j0 as isize + off) as usize;
                                for ((d, &k), &x) in d[j0..j1].iter_mut().zip(&k[j0..j1]).zip(&row[s0..s0 + j1 - j0]) {
                                    *d += k * x;
                                }
                            } else {
                                for j in j0..j1 {
                                    d[j] += k[j] * row[(j as isize * stride as isize + off) as usize];
                                }
                            }
                            for j in (0..j0).chain(j1.max(j0)..ow) {
                                if let Some(xx) = tap(j as isize * stride as isize + off, w, sp.padding) {
                                    d[j] += k[j] * row[xx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let op = Op::Involution { x: self.id, kernels: kernels.id, groups, size, spatial: sp };
        self.tape.push(op, tensor(&[b, c, oh, ow], out))
    }

    /// Non-overlapping `size×size` average pooling of `[B,C,H,W]`.
    pub fn avg_pool(&self, size: usize) -> Result<Self> {
        let xs = self.shape();
        if xs.len() != 4 || size == 0 || xs[2] % size != 0 || xs[3] % size != 0 {
            return Err(Error::Shape { op: "avg_pool2d", lhs: xs, rhs: vec![size] });
        }
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / size, w / size);
        let x = self.value();
        let s = T::one() / T::of((size * size) as f64);
        let mut out = vec![T::zero(); bc * oh * ow];
        for p in 0..bc {
            for i in 0..h {
                for j in 0..w {
                    out[(p * oh + i / size) * ow + j / size] += x.data()[(p * h + i) * w + j] * s;
                }
            }
        }
        self.tape.push(Op::AvgPool { x: self.id, size }, tensor(&[xs[0], xs[1], oh, ow], out))
    }
}

fn reduce_leading<T: Float>(g: &Tensor<T>, inner_shape: &[usize]) -> Tensor<T> {
    let inner = numel(inner_shape);
    let mut acc = vec![T::zero(); inner];
    for row in g.data().chunks(inner) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    tensor(inner_shape, acc)
}

fn backward_rule<T: Float>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let val = |i: usize| nodes[i].value.as_ref();
    let needs = |i: usize| nodes[i].needs_grad;
    let out = node.value.as_ref();
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => vec![(*a, zip(g, val(*b), |x, y| x * y)), (*b, zip(g, val(*a), |x, y| x * y))],
        Op::AddBroadcast(a, b) => vec![(*a, g.clone()), (*b, reduce_leading(g, val(*b).shape()))],
        Op::MulBroadcast(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let inner = y.numel();
            let ga: Vec<T> = g
                .data()
                .chunks(inner)
                .flat_map(|row| row.iter().zip(y.data()).map(|(&p, &q)| p * q))
                .collect();
            let prod = zip(g, x, |p, q| p * q);
            vec![(*a, tensor(x.shape(), ga)), (*b, reduce_leading(&prod, y.shape()))]
        }
        Op::Scale(a, s) => vec![(*a, g.map(|v| v * *s))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Exp(a) => vec![(*a, zip(g, out, |x, y| x * y))],
        Op::Log(a) => vec![(*a, zip(g, val(*a), |x, y| x / y))],
        Op::Sqrt(a) => vec![(*a, zip(g, out, |x, y| x / (y + y)))],
        Op::Relu(a) => vec![(*a, zip(g, val(*a), |x, y| if y > T::zero() { x } else { T::zero() }))],
        Op::Gelu(a) => vec![(*a, zip(g, val(*a), |x, y| x * gelu_parts(y).1))],
        Op::Matmul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            let mut res = Vec::with_capacity(2);
            if needs(*a) {
                let mut ga = vec![T::zero(); m * k];
                matmul_into(g.data(), y.data(), &mut ga, m, n, k, false, true, false);
                res.push((*a, tensor(&[m, k], ga)));
            }
            if needs(*b) {
                let mut gb = vec![T::zero(); k * n];
                matmul_into(x.data(), g.data(), &mut gb, k, m, n, true, false, false);
                res.push((*b, tensor(&[k, n], gb)));
            }
            res
        }
        Op::Bmm { a, b, trans_b } => {
            let (x, y) = (val(*a), val(*b));
            let (bs, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let n = out.shape()[2];
            let mut ga = vec![T::zero(); bs * m * k];
            let mut gb = vec![T::zero(); bs * k * n];
            for i in 0..bs {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                let xi = &x.data()[i * m * k..(i + 1) * m * k];
                let yi = &y.data()[i * k * n..(i + 1) * k * n];
                let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                if *trans_b {
                    // out = x·yᵀ with y [n,k]: gx = g·y, gy = gᵀ·x
                    matmul_into(gi, yi, ga_i, m, n, k, false, false, false);
                    matmul_into(gi, xi, gb_i, n, m, k, true, false, false);
                } else {
                    matmul_into(gi, yi, ga_i, m, n, k, false, true, false);
                    matmul_into(xi, gi, gb_i, k, m, n, true, false, false);
                }
            }
            vec![(*a, tensor(x.shape(), ga)), (*b, tensor(y.shape(), gb))]
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![(*a, permute_data(g, &inv))]
        }
        Op::Reshape(a) => vec![(*a, tensor(val(*a).shape(), g.data().to_vec()))],
        Op::Expand(a) => vec![(*a, reduce_leading(g, val(*a).shape()))],
        Op::Concat(ins, axis) => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let mut offset = 0;
            let mut res = Vec::with_capacity(ins.len());
            for &i in ins {
                let len = val(i).shape()[*axis];
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * shape[*axis] + offset) * inner;
                    data.extend_from_slice(&g.data()[base..base + len * inner]);
                }
                offset += len;
                res.push((i, tensor(val(i).shape(), data)));
            }
            res
        }
        Op::Slice { input, axis, start } => {
            let shape = val(*input).shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let len = out.shape()[*axis];
            let mut data = vec![T::zero(); numel(shape)];
            for o in 0..outer {
                let base = (o * shape[*axis] + start) * inner;
                data[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*input, tensor(shape, data))]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let x = val(*a);
            vec![(*a, Tensor::full(x.shape(), g.item() / T::of(x.numel() as f64)))]
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let shape = val(*a).shape();
            let outer: usize = shape[..*axis].iter().product();
            let dim = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let s = if matches!(node.op, Op::MeanAxis(..)) { T::one() / T::of(dim as f64) } else { T::one() };
            let mut data = Vec::with_capacity(numel(shape));
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..dim {
                    data.extend(src.iter().map(|&v| v * s));
                }
            }
            vec![(*a, tensor(shape, data))]
        }
        Op::Softmax { input, temperature } => {
            let n = *out.shape().last().unwrap();
            let mut gx = vec![T::zero(); out.numel()];
            for ((y, gy), dst) in out.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    dst[j] = y[j] * (gy[j] - dot) / *temperature;
                }
            }
            vec![(*input, tensor(out.shape(), gx))]
        }
        Op::LogSoftmax { input, temperature } => {
            let n = *out.shape().last().unwrap();
            let mut gx = vec![T::zero(); out.numel()];
            for ((y, gy), dst) in out.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
                let total: T = gy.iter().copied().sum();
                for j in 0..n {
                    dst[j] = (gy[j] - y[j].exp() * total) / *temperature;
                }
            }
            vec![(*input, tensor(out.shape(), gx))]
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let gv = val(*gain);
            let d = gv.numel();
            let rows = out.numel() / d;
            let mut gx = vec![T::zero(); out.numel()];
            let mut ggain = vec![T::zero(); d];
            let mut gbias = vec![T::zero(); d];
            let inv_d = T::one() / T::of(d as f64);
            let mut dh = vec![T::zero(); d];
            for r in 0..rows {
                let gr = &g.data()[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut mean_dh = T::zero();
                let mut mean_dh_h = T::zero();
                for j in 0..d {
                    ggain[j] += gr[j] * hr[j];
                    gbias[j] += gr[j];
                    dh[j] = gr[j] * gv.data()[j];
                    mean_dh += dh[j];
                    mean_dh_h += dh[j] * hr[j];
                }
                mean_dh *= inv_d;
                mean_dh_h *= inv_d;
                for j in 0..d {
                    gx[r * d + j] = rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                }
            }
            vec![(*x, tensor(out.shape(), gx)), (*gain, tensor(&[d], ggain)), (*bias, tensor(&[d], gbias))]
        }
        Op::GroupNorm { x, gain, bias, groups, xhat, rstd } => {
            let shape = out.shape();
            let (c, hw) = (shape[1], shape[2] * shape[3]);
            let cg = c / groups;
            let block = cg * hw;
            let gv = val(*gain);
            let mut gx = vec![T::zero(); out.numel()];
            let mut ggain = vec![T::zero(); c];
            let mut gbias = vec![T::zero(); c];
            let inv = T::one() / T::of(block as f64);
            let mut dh = vec![T::zero(); block];
            for n in 0..rstd.len() {
                let g0 = (n % groups) * cg;
                let (mut mean_dh, mut mean_dh_h) = (T::zero(), T::zero());
                for i in 0..block {
                    let ch = g0 + i / hw;
                    let gi = g.data()[n * block + i];
                    let hi = xhat[n * block + i];
                    ggain[ch] += gi * hi;
                    gbias[ch] += gi;
                    dh[i] = gi * gv.data()[ch];
                    mean_dh += dh[i];
                    mean_dh_h += dh[i] * hi;
                }
                mean_dh *= inv;
                mean_dh_h *= inv;
                for i in 0..block {
                    gx[n * block + i] = rstd[n] * (dh[i] - mean_dh - xhat[n * block + i] * mean_dh_h);
                }
            }
            vec![(*x, tensor(shape, gx)), (*gain, tensor(&[c], ggain)), (*bias, tensor(&[c], gbias))]
        }
        Op::Conv2d { x, w, bias, spatial } => {
            let (xv, wv) = (val(*x), val(*w));
            let (xs, ws) = (xv.shape(), wv.shape());
            let os = out.shape();
            let geom = ConvGeom { batch: xs[0], cin: xs[1], h: xs[2], w: xs[3], cout: ws[0], k: ws[2], oh: os[2], ow: os[3] };
            let ckk = geom.cin * geom.k * geom.k;
            let ohw = geom.oh * geom.ow;
            let in_len = geom.cin * geom.h * geom.w;
            let mut cols = vec![T::zero(); ckk * ohw];
            let mut gcols = vec![T::zero(); ckk * ohw];
            let mut gw = vec![T::zero(); wv.numel()];
            let mut gx = vec![T::zero(); xv.numel()];
            for n in 0..geom.batch {
                let gout = &g.data()[n * geom.cout * ohw..(n + 1) * geom.cout * ohw];
                if needs(*w) {
                    im2col(&xv.data()[n * in_len..(n + 1) * in_len], &geom, *spatial, &mut cols);
                    matmul_into(gout, &cols, &mut gw, geom.cout, ohw, ckk, false, true, true);
                }
                if needs(*x) {
                    matmul_into(wv.data(), gout, &mut gcols, ckk, geom.cout, ohw, true, false, false);
                    col2im(&gcols, &geom, *spatial, &mut gx[n * in_len..(n + 1) * in_len]);
                }
            }
            let mut res = vec![(*x, tensor(xs, gx)), (*w, tensor(ws, gw))];
            if let Some(b) = bias {
                let mut gb = vec![T::zero(); geom.cout];
                for (i, plane) in g.data().chunks(ohw).enumerate() {
                    gb[i % geom.cout] += plane.iter().copied().sum::<T>();
                }
                res.push((*b, tensor(&[geom.cout], gb)));
            }
            res
        }
        Op::Involution { x, kernels, groups, size, spatial } => {
            let (xv, kv) = (val(*x), val(*kernels));
            let xs = xv.shape();
            let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (oh, ow) = (out.shape()[2], out.shape()[3]);
            let (size, stride, pad) = (*size, spatial.stride, spatial.pad);
            let cg = c / groups;
            let ohw = oh * ow;
            let mut gx = vec![T::zero(); xv.numel()];
            let mut gk = vec![T::zero(); kv.numel()];
            for n in 0..b {
                for ch in 0..c {
                    let grp = ch / cg;
                    let base = (n * c + ch) * h * w;
                    let gout = &g.data()[(n * c + ch) * ohw..(n * c + ch + 1) * ohw];
                    for u in 0..size {
                        for v in 0..size {
                            let kbase = ((n * groups + grp) * size * size + u * size + v) * ohw;
                            let off = v as isize - pad as isize;
                            let (j0, j1) = tap_range(ow, stride, off, w);
                            for i in 0..oh {
                                let Some(y) = tap((i * stride + u) as isize - pad as isize, h, spatial.padding) else { continue };
                                let go = &gout[i * ow..(i + 1) * ow];
                                let k = &kv.data()[kbase + i * ow..kbase + (i + 1) * ow];
                                let gkr = &mut gk[kbase + i * ow..kbase + (i + 1) * ow];
                                let row = &xv.data()[base + y * w..base + (y + 1) * w];
                                let gxr = &mut gx[base + y * w..base + (y + 1) * w];
                                let cols = (j0..j1).chain((0..j0).chain(j1.max(j0)..ow).filter(|_| spatial.padding == Padding::Circular));
                                if stride == 1 && j1 > j0 {
                                    let s0 = (j0 as isize + off) as usize;
                                    let n = j1 - j0;
                                    for t in 0..n {
                                        gxr[s0 + t] += go[j0 + t] * k[j0 + t];
                                        gkr[j0 + t] += go[j0 + t] * row[s0 + t];
                                    }
                                    if spatial.padding == Padding::Circular {
                                        for j in (0..j0).chain(j1..ow) {
                                            let xx = tap(j as isize + off, w, spatial.padding).expect("circular");
                                            gxr[xx] += go[j] * k[j];
                                            gkr[j] += go[j] * row[xx];
                                        }
                                    }
                                } else {
                                    for j in cols {
                                        let Some(xx) = tap(j as isize * stride as isize + off, w, spatial.padding) else { continue };
                                        gxr[xx] += go[j] * k[j];
                                        gkr[j] += go[j] * row[xx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![(*x, tensor(xs, gx)), (*kernels, tensor(kv.shape(), gk))]
        }
        Op::AvgPool { x, size } => {
            let xs = val(*x).shape();
            let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
            let (oh, ow) = (h / size, w / size);
            let s = T::one() / T::of((size * size) as f64);
            let mut gx = vec![T::zero(); numel(xs)];
            for p in 0..bc {
                for i in 0..h {
                    for j in 0..w {
                        gx[(p * h + i) * w + j] = g.data()[(p * oh + i / size) * ow + j / size] * s;
                    }
                }
            }
            vec![(*x, tensor(xs, gx))]
        }
        Op::Custom { inputs, backward, .. } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            inputs.iter().copied().zip(backward(&ins, out, g)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let w = tape.variable(t(&[2, 3], &[1., -2., 3., 0.5, 0.1, 9.]));
        let loss = w.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn quadratic_and_reuse_accumulate() {
        let tape = Tape::new();
        let w = tape.variable(t(&[2], &[1.0, -2.0]));
        let loss = w.mul(&w).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, -4.0]);

        // w used on two separate paths: d/dw (sum(3w) + sum(w)) = 4
        let tape = Tape::new();
        let w = tape.variable(t(&[3], &[0.3, 1.0, -5.0]));
        let a = w.scale(3.0).unwrap().sum().unwrap();
        let b = w.sum().unwrap();
        let g = tape.backward(a.add(&b).unwrap()).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[4.0; 3]);
    }

    #[test]
    fn backward_contract_errors() {
        let tape = Tape::new();
        let w = tape.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w.scale(2.0).unwrap()), Err(Error::Contract(_))));
        let c = tape.constant(t(&[1], &[1.0]));
        assert!(matches!(tape.backward(c.sum().unwrap()), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_slice_mean() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1], &[3.0]));
        let c = Var::concat(&[a, b], 0).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(c.slice(0, 1, 2).unwrap().value().data(), &[2.0, 3.0]);
        let m = tape.constant(t(&[2], &[2.0, 4.0])).mean().unwrap();
        assert_eq!(m.item(), 3.0);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        for v in x.softmax_rows(1.0).unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let y = x.softmax_rows(1.0).unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
        assert!(matches!(x.softmax_rows(0.0), Err(Error::Parameter(_))));
        assert!(matches!(x.softmax_rows(-1.0), Err(Error::Parameter(_))));
        // huge logits stay finite
        let x = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        assert!(x.softmax_rows(1.0).unwrap().value().is_finite());
    }

    #[test]
    fn permute_roundtrip() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        assert_eq!(p.value().at(&[3, 1, 2]), x.value().at(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(*back.value(), *x.value());
    }

    #[test]
    fn non_finite_is_reported_with_op_name() {
        let tape = Tape::with_finite_checks(true);
        let x = tape.variable(t(&[2], &[-1.0, 4.0]));
        match x.sqrt() {
            Err(Error::NonFinite { op }) => assert_eq!(op, "sqrt"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
        let tape = Tape::with_finite_checks(false);
        let x = tape.variable(t(&[2], &[-1.0, 4.0]));
        assert!(x.sqrt().is_ok());
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }
}
