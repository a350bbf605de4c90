//! Define-by-run reverse-mode differentiation tape.
//!
//! Operations append nodes in execution order, so the node list is already a
//! topological order; `backward` walks it once in reverse. Gradients
//! accumulate additively, which makes repeated backward calls and shared
//! subexpressions come out right by construction.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: u32,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Broadcast,
    Reshape,
    Sum,
    Mean,
    SumAxis(usize),
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sin,
    Cos,
    Square,
    Neg,
    AddScalar(S),
    MulScalar(S),
    ClampMin(S),
    Huber,
    Concat(usize),
    Slice { axis: usize, start: usize },
    CumsumExclusive,
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    op: Op<S>,
    parents: Vec<u32>,
}

pub struct Tape<S: Scalar> {
    id: u64,
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, parents: Vec<u32>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len() as u32;
        nodes.push(Node {
            value,
            grad: None,
            op,
            parents,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn check(&self, v: Var) -> u32 {
        debug_assert_eq!(v.tape, self.id, "Var used on a foreign tape");
        v.index
    }

    /// Record a leaf tensor (parameter or constant input).
    pub fn leaf(&self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, vec![])
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        let i = self.check(v);
        self.nodes.borrow()[i as usize].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        let i = self.check(v);
        self.nodes.borrow()[i as usize].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<S> {
        let i = self.check(v);
        self.nodes.borrow()[i as usize].value.item()
    }

    /// Gradient accumulated so far, if backward has reached this node.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let i = self.check(v);
        self.nodes.borrow()[i as usize].grad.clone()
    }

    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        let i = self.check(v);
        f(&self.nodes.borrow()[i as usize].value)
    }

    // ── elementwise helpers ─────────────────────────────────────────────

    fn binary_same_shape(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var> {
        let ia = self.check(a);
        let ib = self.check(b);
        let nodes = self.nodes.borrow();
        let ta = &nodes[ia as usize].value;
        let tb = &nodes[ib as usize].value;
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        drop(nodes);
        Ok(self.push(value, op, vec![ia, ib]))
    }

    fn unary(&self, v: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let i = self.check(v);
        let value = self.nodes.borrow()[i as usize].value.map(f);
        self.push(value, op, vec![i])
    }

    // ── operations ──────────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let ia = self.check(a);
        let ib = self.check(b);
        let nodes = self.nodes.borrow();
        let ta = &nodes[ia as usize].value;
        let tb = &nodes[ib as usize].value;
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, ta.data(), false, tb.data(), false, S::zero(), &mut out);
        let value = Tensor::from_vec(vec![m, n], out)?;
        drop(nodes);
        Ok(self.push(value, Op::MatMul, vec![ia, ib]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b, Op::Div, |x, y| x / y)
    }

    /// Expand `v` to `shape` by numpy-style trailing alignment: the source
    /// shape, right-aligned against the target, may only repeat along leading
    /// dims or dims of extent 1.
    pub fn broadcast(&self, v: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(v);
        let nodes = self.nodes.borrow();
        let t = &nodes[i as usize].value;
        let from = t.shape();
        if !broadcast_compatible(from, shape) {
            return Err(Error::Shape {
                op: "broadcast",
                lhs: from.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = broadcast_forward(t, shape);
        let value = Tensor::from_vec(shape.to_vec(), data)?;
        drop(nodes);
        Ok(self.push(value, Op::Broadcast, vec![i]))
    }

    pub fn reshape(&self, v: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(v);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[i as usize].value.clone().reshaped(shape.to_vec())?
        };
        Ok(self.push(value, Op::Reshape, vec![i]))
    }

    pub fn sum(&self, v: Var) -> Var {
        let i = self.check(v);
        let total = self.nodes.borrow()[i as usize]
            .value
            .data()
            .iter()
            .fold(S::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(total), Op::Sum, vec![i])
    }

    pub fn mean(&self, v: Var) -> Var {
        let i = self.check(v);
        let (total, n) = {
            let nodes = self.nodes.borrow();
            let d = nodes[i as usize].value.data();
            (d.iter().fold(S::zero(), |acc, &x| acc + x), d.len())
        };
        let value = Tensor::scalar(total / S::of(n as f64));
        self.push(value, Op::Mean, vec![i])
    }

    /// Sum out one axis, removing it from the shape.
    pub fn sum_axis(&self, v: Var, axis: usize) -> Result<Var> {
        let i = self.check(v);
        let nodes = self.nodes.borrow();
        let t = &nodes[i as usize].value;
        let shape = t.shape();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::Shape {
                op: "sum_axis",
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        let (outer, dim, inner) = split_axis(shape, axis);
        let mut out = vec![S::zero(); outer * inner];
        let src = t.data();
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (x, y) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *x += *y;
                }
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        let value = Tensor::from_vec(new_shape, out)?;
        drop(nodes);
        Ok(self.push(value, Op::SumAxis(axis), vec![i]))
    }

    pub fn relu(&self, v: Var) -> Var {
        self.unary(v, Op::Relu, |x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn tanh(&self, v: Var) -> Var {
        self.unary(v, Op::Tanh, |x| x.tanh())
    }

    pub fn sigmoid(&self, v: Var) -> Var {
        self.unary(v, Op::Sigmoid, |x| S::one() / (S::one() + (-x).exp()))
    }

    /// Numerically stable ln(1 + eˣ).
    pub fn softplus(&self, v: Var) -> Var {
        self.unary(v, Op::Softplus, softplus_value)
    }

    pub fn exp(&self, v: Var) -> Var {
        self.unary(v, Op::Exp, |x| x.exp())
    }

    pub fn log(&self, v: Var) -> Var {
        self.unary(v, Op::Log, |x| x.ln())
    }

    pub fn sin(&self, v: Var) -> Var {
        self.unary(v, Op::Sin, |x| x.sin())
    }

    pub fn cos(&self, v: Var) -> Var {
        self.unary(v, Op::Cos, |x| x.cos())
    }

    pub fn square(&self, v: Var) -> Var {
        self.unary(v, Op::Square, |x| x * x)
    }

    pub fn neg(&self, v: Var) -> Var {
        self.unary(v, Op::Neg, |x| -x)
    }

    pub fn add_scalar(&self, v: Var, c: S) -> Var {
        self.unary(v, Op::AddScalar(c), |x| x + c)
    }

    pub fn mul_scalar(&self, v: Var, c: S) -> Var {
        self.unary(v, Op::MulScalar(c), |x| x * c)
    }

    pub fn clamp_min(&self, v: Var, c: S) -> Var {
        self.unary(v, Op::ClampMin(c), |x| if x > c { x } else { c })
    }

    /// Elementwise smooth-L1: 0.5x² for |x| < 1, |x| − 0.5 otherwise.
    pub fn huber(&self, v: Var) -> Var {
        let half = S::of(0.5);
        self.unary(v, Op::Huber, move |x| {
            if x.abs() < S::one() {
                half * x * x
            } else {
                x.abs() - half
            }
        })
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let idxs: Vec<u32> = parts.iter().map(|&p| self.check(p)).collect();
        let nodes = self.nodes.borrow();
        let first = nodes[idxs[0] as usize].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut cat_dim = 0;
        for &i in &idxs {
            let s = nodes[i as usize].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            cat_dim += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = cat_dim;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = vec![S::zero(); outer * cat_dim * inner];
        for o in 0..outer {
            let mut offset = 0;
            for &i in &idxs {
                let t = &nodes[i as usize].value;
                let d = t.shape()[axis];
                let src = &t.data()[o * d * inner..(o + 1) * d * inner];
                let dst_base = (o * cat_dim + offset) * inner;
                out[dst_base..dst_base + d * inner].copy_from_slice(src);
                offset += d;
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        drop(nodes);
        Ok(self.push(value, Op::Concat(axis), idxs))
    }

    pub fn slice(&self, v: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let i = self.check(v);
        let nodes = self.nodes.borrow();
        let t = &nodes[i as usize].value;
        let shape = t.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape.to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let (outer, dim, inner) = split_axis(shape, axis);
        let mut out = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let src_base = (o * dim + start) * inner;
            let dst_base = o * len * inner;
            out[dst_base..dst_base + len * inner]
                .copy_from_slice(&t.data()[src_base..src_base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let value = Tensor::from_vec(new_shape, out)?;
        drop(nodes);
        Ok(self.push(value, Op::Slice { axis, start }, vec![i]))
    }

    /// Exclusive prefix sum along the last axis: out[..., k] = Σ_{j<k} in[..., j].
    pub fn cumsum_exclusive(&self, v: Var) -> Result<Var> {
        let i = self.check(v);
        let nodes = self.nodes.borrow();
        let t = &nodes[i as usize].value;
        let shape = t.shape().to_vec();
        let last = *shape.last().ok_or_else(|| Error::contract("cumsum on rank-0"))?;
        let mut out = vec![S::zero(); t.numel()];
        for (row_out, row_in) in out.chunks_mut(last).zip(t.data().chunks(last)) {
            let mut acc = S::zero();
            for (y, &x) in row_out.iter_mut().zip(row_in.iter()) {
                *y = acc;
                acc += x;
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        drop(nodes);
        Ok(self.push(value, Op::CumsumExclusive, vec![i]))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Populate gradients of every tape-attached tensor reachable from `loss`.
    /// Each call propagates one fresh pass through a scratch buffer and adds
    /// it into the persistent slots, so repeated calls accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let li = self.check(loss) as usize;
        let nodes = self.nodes.borrow();
        if nodes[li].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[li].value.shape()
            )));
        }

        let mut work: Vec<Option<Tensor<S>>> = (0..=li).map(|_| None).collect();
        work[li] = Some(Tensor::scalar(S::one()));

        // Reverse pass: later nodes only feed gradients to earlier ones.
        for i in (0..=li).rev() {
            let Some(g) = work[i].take() else { continue };
            let contribs = node_backward(&nodes, &nodes[i], &g)?;
            work[i] = Some(g);
            for (parent, contrib) in contribs {
                accumulate(&mut work[parent as usize], contrib);
            }
        }

        drop(nodes);
        let mut nodes = self.nodes.borrow_mut();
        for (i, w) in work.into_iter().enumerate() {
            if let Some(w) = w {
                accumulate(&mut nodes[i].grad, w);
            }
        }
        Ok(())
    }

    /// Dispatch by operation id; the uniform entry point for the op registry.
    pub fn forward_op(&self, op: &OpSpec<S>, inputs: &[Var]) -> Result<Var> {
        let want = op.arity();
        if inputs.len() != want {
            return Err(Error::contract(format!(
                "{} expects {} inputs, got {}",
                op.name(),
                want,
                inputs.len()
            )));
        }
        match op {
            OpSpec::MatMul => self.matmul(inputs[0], inputs[1]),
            OpSpec::Add => self.add(inputs[0], inputs[1]),
            OpSpec::Sub => self.sub(inputs[0], inputs[1]),
            OpSpec::Mul => self.mul(inputs[0], inputs[1]),
            OpSpec::Div => self.div(inputs[0], inputs[1]),
            OpSpec::Broadcast(shape) => self.broadcast(inputs[0], shape),
            OpSpec::Reshape(shape) => self.reshape(inputs[0], shape),
            OpSpec::Sum => Ok(self.sum(inputs[0])),
            OpSpec::Mean => Ok(self.mean(inputs[0])),
            OpSpec::SumAxis(axis) => self.sum_axis(inputs[0], *axis),
            OpSpec::Relu => Ok(self.relu(inputs[0])),
            OpSpec::Tanh => Ok(self.tanh(inputs[0])),
            OpSpec::Sigmoid => Ok(self.sigmoid(inputs[0])),
            OpSpec::Softplus => Ok(self.softplus(inputs[0])),
            OpSpec::Exp => Ok(self.exp(inputs[0])),
            OpSpec::Log => Ok(self.log(inputs[0])),
            OpSpec::Sin => Ok(self.sin(inputs[0])),
            OpSpec::Cos => Ok(self.cos(inputs[0])),
            OpSpec::Square => Ok(self.square(inputs[0])),
            OpSpec::Neg => Ok(self.neg(inputs[0])),
            OpSpec::AddScalar(c) => Ok(self.add_scalar(inputs[0], *c)),
            OpSpec::MulScalar(c) => Ok(self.mul_scalar(inputs[0], *c)),
            OpSpec::ClampMin(c) => Ok(self.clamp_min(inputs[0], *c)),
            OpSpec::Huber => Ok(self.huber(inputs[0])),
            OpSpec::Concat(axis) => self.concat(inputs, *axis),
            OpSpec::Slice { axis, start, len } => self.slice(inputs[0], *axis, *start, *len),
            OpSpec::CumsumExclusive => self.cumsum_exclusive(inputs[0]),
        }
    }
}

fn softplus_value<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Operation identifier with the parameters needed to invoke it.
#[derive(Clone, Debug)]
pub enum OpSpec<S> {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
    Sum,
    Mean,
    SumAxis(usize),
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sin,
    Cos,
    Square,
    Neg,
    AddScalar(S),
    MulScalar(S),
    ClampMin(S),
    Huber,
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    CumsumExclusive,
}

impl<S: Scalar> OpSpec<S> {
    pub fn name(&self) -> &'static str {
        match self {
            OpSpec::MatMul => "matmul",
            OpSpec::Add => "add",
            OpSpec::Sub => "sub",
            OpSpec::Mul => "mul",
            OpSpec::Div => "div",
            OpSpec::Broadcast(_) => "broadcast",
            OpSpec::Reshape(_) => "reshape",
            OpSpec::Sum => "sum",
            OpSpec::Mean => "mean",
            OpSpec::SumAxis(_) => "sum_axis",
            OpSpec::Relu => "relu",
            OpSpec::Tanh => "tanh",
            OpSpec::Sigmoid => "sigmoid",
            OpSpec::Softplus => "softplus",
            OpSpec::Exp => "exp",
            OpSpec::Log => "log",
            OpSpec::Sin => "sin",
            OpSpec::Cos => "cos",
            OpSpec::Square => "square",
            OpSpec::Neg => "neg",
            OpSpec::AddScalar(_) => "add_scalar",
            OpSpec::MulScalar(_) => "mul_scalar",
            OpSpec::ClampMin(_) => "clamp_min",
            OpSpec::Huber => "huber",
            OpSpec::Concat(_) => "concat",
            OpSpec::Slice { .. } => "slice",
            OpSpec::CumsumExclusive => "cumsum_exclusive",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpSpec::MatMul
            | OpSpec::Add
            | OpSpec::Sub
            | OpSpec::Mul
            | OpSpec::Div
            | OpSpec::Concat(_) => 2,
            _ => 1,
        }
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, contrib: Tensor<S>) {
    match slot {
        None => *slot = Some(contrib),
        Some(g) => {
            debug_assert_eq!(g.shape(), contrib.shape());
            for (x, y) in g.data_mut().iter_mut().zip(contrib.data()) {
                *x += *y;
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_compatible(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let offset = to.len() - from.len();
    from.iter()
        .zip(&to[offset..])
        .all(|(&f, &t)| f == t || f == 1)
}

fn broadcast_forward<S: Scalar>(t: &Tensor<S>, to: &[usize]) -> Vec<S> {
    let from = t.shape();
    let offset = to.len() - from.len();
    // Stride of each target dim within the source, 0 where the source repeats.
    let mut src_strides = vec![0isize; to.len()];
    let mut stride = 1isize;
    for d in (0..from.len()).rev() {
        src_strides[offset + d] = if from[d] == 1 { 0 } else { stride };
        stride *= from[d] as isize;
    }
    let numel: usize = to.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; to.len()];
    let mut src_off = 0isize;
    let src = t.data();
    for _ in 0..numel {
        out.push(src[src_off as usize]);
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            src_off += src_strides[d];
            if idx[d] < to[d] {
                break;
            }
            src_off -= src_strides[d] * to[d] as isize;
            idx[d] = 0;
        }
    }
    out
}

fn broadcast_backward<S: Scalar>(g: &Tensor<S>, from: &[usize]) -> Tensor<S> {
    let to = g.shape();
    let offset = to.len() - from.len();
    let mut src_strides = vec![0isize; to.len()];
    let mut stride = 1isize;
    for d in (0..from.len()).rev() {
        src_strides[offset + d] = if from[d] == 1 { 0 } else { stride };
        stride *= from[d] as isize;
    }
    let mut out = Tensor::zeros(from);
    let data = out.data_mut();
    let mut idx = vec![0usize; to.len()];
    let mut src_off = 0isize;
    for &gv in g.data() {
        data[src_off as usize] += gv;
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            src_off += src_strides[d];
            if idx[d] < to[d] {
                break;
            }
            src_off -= src_strides[d] * to[d] as isize;
            idx[d] = 0;
        }
    }
    out
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("zip_map shape")
}

fn node_backward<S: Scalar>(
    nodes: &[Node<S>],
    node: &Node<S>,
    g: &Tensor<S>,
) -> Result<Vec<(u32, Tensor<S>)>> {
    let parent_value = |slot: usize| &nodes[node.parents[slot] as usize].value;
    let p = |slot: usize| node.parents[slot];
    let out = match &node.op {
        Op::Leaf => vec![],
        Op::MatMul => {
            let a = parent_value(0);
            let b = parent_value(1);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let mut da = vec![S::zero(); m * k];
            S::gemm(m, n, k, g.data(), false, b.data(), true, S::zero(), &mut da);
            let mut db = vec![S::zero(); k * n];
            S::gemm(k, m, n, a.data(), true, g.data(), false, S::zero(), &mut db);
            vec![
                (p(0), Tensor::from_vec(vec![m, k], da)?),
                (p(1), Tensor::from_vec(vec![k, n], db)?),
            ]
        }
        Op::Add => vec![(p(0), g.clone()), (p(1), g.clone())],
        Op::Sub => vec![(p(0), g.clone()), (p(1), g.map(|x| -x))],
        Op::Mul => vec![
            (p(0), zip_map(g, parent_value(1), |gv, bv| gv * bv)),
            (p(1), zip_map(g, parent_value(0), |gv, av| gv * av)),
        ],
        Op::Div => {
            let b = parent_value(1);
            let da = zip_map(g, b, |gv, bv| gv / bv);
            // d(a/b)/db = −a/b² = −y/b
            let gy = zip_map(g, &node.value, |gv, yv| gv * yv);
            let db = zip_map(&gy, b, |gyv, bv| -(gyv / bv));
            vec![(p(0), da), (p(1), db)]
        }
        Op::Broadcast => vec![(p(0), broadcast_backward(g, parent_value(0).shape()))],
        Op::Reshape => {
            let from = parent_value(0).shape().to_vec();
            vec![(p(0), g.clone().reshaped(from)?)]
        }
        Op::Sum => {
            let gv = g.item()?;
            vec![(p(0), Tensor::full(parent_value(0).shape(), gv))]
        }
        Op::Mean => {
            let x = parent_value(0);
            let gv = g.item()? / S::of(x.numel() as f64);
            vec![(p(0), Tensor::full(x.shape(), gv))]
        }
        Op::SumAxis(axis) => {
            let x = parent_value(0);
            let (outer, dim, inner) = split_axis(x.shape(), *axis);
            let mut out = Tensor::zeros(x.shape());
            let dst = out.data_mut();
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for d in 0..dim {
                    let base = (o * dim + d) * inner;
                    dst[base..base + inner].copy_from_slice(src);
                }
            }
            vec![(p(0), out)]
        }
        Op::Relu => vec![(
            p(0),
            zip_map(g, parent_value(0), |gv, xv| {
                if xv > S::zero() {
                    gv
                } else {
                    S::zero()
                }
            }),
        )],
        Op::Tanh => vec![(p(0), zip_map(g, &node.value, |gv, yv| gv * (S::one() - yv * yv)))],
        Op::Sigmoid => vec![(
            p(0),
            zip_map(g, &node.value, |gv, yv| gv * yv * (S::one() - yv)),
        )],
        Op::Softplus => vec![(
            p(0),
            zip_map(g, parent_value(0), |gv, xv| {
                gv * (S::one() / (S::one() + (-xv).exp()))
            }),
        )],
        Op::Exp => vec![(p(0), zip_map(g, &node.value, |gv, yv| gv * yv))],
        Op::Log => vec![(p(0), zip_map(g, parent_value(0), |gv, xv| gv / xv))],
        Op::Sin => vec![(p(0), zip_map(g, parent_value(0), |gv, xv| gv * xv.cos()))],
        Op::Cos => vec![(p(0), zip_map(g, parent_value(0), |gv, xv| -(gv * xv.sin())))],
        Op::Square => {
            let two = S::of(2.0);
            vec![(
                p(0),
                zip_map(g, parent_value(0), move |gv, xv| two * xv * gv),
            )]
        }
        Op::Neg => vec![(p(0), g.map(|x| -x))],
        Op::AddScalar(_) => vec![(p(0), g.clone())],
        Op::MulScalar(c) => {
            let c = *c;
            vec![(p(0), g.map(|x| x * c))]
        }
        Op::ClampMin(c) => {
            let c = *c;
            vec![(
                p(0),
                zip_map(g, parent_value(0), move |gv, xv| {
                    if xv > c {
                        gv
                    } else {
                        S::zero()
                    }
                }),
            )]
        }
        Op::Huber => vec![(
            p(0),
            zip_map(g, parent_value(0), |gv, xv| {
                let d = if xv.abs() < S::one() { xv } else { xv.signum() };
                gv * d
            }),
        )],
        Op::Concat(axis) => {
            let shape = node.value.shape();
            let (outer, cat_dim, inner) = split_axis(shape, *axis);
            let mut offset = 0;
            let mut contribs = Vec::with_capacity(node.parents.len());
            for &pi in &node.parents {
                let pshape = nodes[pi as usize].value.shape();
                let d = pshape[*axis];
                let mut part = Tensor::zeros(pshape);
                let dst = part.data_mut();
                for o in 0..outer {
                    let src_base = (o * cat_dim + offset) * inner;
                    let dst_base = o * d * inner;
                    dst[dst_base..dst_base + d * inner]
                        .copy_from_slice(&g.data()[src_base..src_base + d * inner]);
                }
                offset += d;
                contribs.push((pi, part));
            }
            contribs
        }
        Op::Slice { axis, start } => {
            let x = parent_value(0);
            let (outer, dim, inner) = split_axis(x.shape(), *axis);
            let len = node.value.shape()[*axis];
            let mut out = Tensor::zeros(x.shape());
            let dst = out.data_mut();
            for o in 0..outer {
                let dst_base = (o * dim + start) * inner;
                let src_base = o * len * inner;
                dst[dst_base..dst_base + len * inner]
                    .copy_from_slice(&g.data()[src_base..src_base + len * inner]);
            }
            vec![(p(0), out)]
        }
        Op::CumsumExclusive => {
            // y_k = Σ_{j<k} x_j, so dx_j = Σ_{k>j} g_k.
            let shape = node.value.shape().to_vec();
            let last = *shape.last().unwrap();
            let mut out = vec![S::zero(); g.numel()];
            for (row_out, row_g) in out.chunks_mut(last).zip(g.data().chunks(last)) {
                let mut acc = S::zero();
                for j in (0..last).rev() {
                    row_out[j] = acc;
                    acc += row_g[j];
                }
            }
            vec![(p(0), Tensor::from_vec(shape, out)?)]
        }
    };
    Ok(out)
}
