//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every node records the op
//! that produced it, its inputs (which always precede it) and a cached
//! forward value. Ops are evaluated eagerly as soon as their inputs have
//! values; graphs built on unbound [`Graph::placeholder`] leaves are
//! evaluated later by [`Graph::forward`], which can also re-bind leaves and
//! replay the whole graph.
//!
//! Broadcasting is explicit ([`Graph::broadcast_to`]); binary elementwise ops
//! require identical shapes.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LeafKind {
    Constant,
    /// Differentiable input that is not a trainable parameter.
    Input,
    Param,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(LeafKind),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Broadcast(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    Max(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::MatMul(..) => "matmul",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Broadcast(..) => "broadcast",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Clamp(..) => "clamp",
            Op::Min(..) => "min",
            Op::Max(..) => "max",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::Min(a, b)
            | Op::Max(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::Broadcast(a)
            | Op::Slice(a, ..)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Clamp(a, ..) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Recorded computation supporting forward replay and reverse-mode gradients.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` was not reached.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes.get(v.0).map_or(&[][..], |s| s)),
        }
    }

    /// Moves the gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(self.shapes.get(v.0).map_or(&[][..], |s| s)),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads.get(v.0).is_some_and(Option::is_some)
    }

    pub fn collect(&mut self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| self.take(v)).collect()
    }
}

fn shape_err(node: usize, op: &'static str, detail: String) -> Error {
    Error::Shape { node, op, detail }
}

fn broadcastable(from: &[usize], to: &[usize]) -> bool {
    from.is_empty()
        || (from.len() == to.len() && from.iter().zip(to).all(|(&f, &t)| f == t || f == 1))
}

/// Maps each flat output index to its source index for a broadcast.
fn broadcast_source_indices(from: &[usize], to: &[usize]) -> Vec<usize> {
    let n: usize = to.iter().product();
    if from.is_empty() || from.iter().product::<usize>() == 1 {
        return vec![0; n];
    }
    let rank = to.len();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if from[d] == 1 { 0 } else { acc };
        acc *= from[d];
    }
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownVar(v.0))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Cached forward value of `v`.
    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.node(v)?.value.as_ref().ok_or(Error::NotEvaluated(v.0))
    }

    fn push_leaf(&mut self, kind: LeafKind, shape: Vec<usize>, value: Option<Tensor>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            shape,
            value,
            requires_grad: kind != LeafKind::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(LeafKind::Constant, shape, Some(t))
    }

    /// Differentiable, non-trainable leaf (e.g. an action for `∇_a Q`).
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(LeafKind::Input, shape, Some(t))
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(LeafKind::Param, shape, Some(t))
    }

    pub fn params(&mut self, ts: &[Tensor]) -> Vec<Var> {
        ts.iter().map(|t| self.param(t.clone())).collect()
    }

    /// Differentiable leaf bound later through [`Graph::forward`].
    pub fn placeholder(&mut self, shape: &[usize]) -> Var {
        self.push_leaf(LeafKind::Input, shape.to_vec(), None)
    }

    /// New constant leaf holding the current value of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v)?.clone();
        Ok(self.constant(t))
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        matches!(self.nodes.get(v.0).map(|n| &n.op), Some(Op::Leaf(LeafKind::Param)))
    }

    /// Indices of all trainable leaves.
    pub fn trainable(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .map(Var)
            .filter(|&v| self.is_trainable(v))
            .collect()
    }

    fn infer_shape(&self, id: usize, op: &Op) -> Result<Vec<usize>> {
        let name = op.name();
        let sh = |v: &Var| -> Result<&[usize]> { Ok(&self.node(*v)?.shape) };
        match op {
            Op::Leaf(_) => unreachable!("leaves carry their own shape"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Min(a, b) | Op::Max(a, b) => {
                let (sa, sb) = (sh(a)?, sh(b)?);
                if sa != sb {
                    return Err(shape_err(id, name, format!("{:?} vs {:?}", sa, sb)));
                }
                Ok(sa.to_vec())
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (sh(a)?, sh(b)?);
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(shape_err(id, name, format!("{:?} x {:?}", sa, sb)));
                }
                Ok(vec![sa[0], sb[1]])
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let sa = sh(a)?;
                match axis {
                    None => Ok(vec![]),
                    Some(ax) if *ax < sa.len() => {
                        let mut s = sa.to_vec();
                        s[*ax] = 1;
                        Ok(s)
                    }
                    Some(ax) => Err(shape_err(id, name, format!("axis {} of {:?}", ax, sa))),
                }
            }
            Op::Broadcast(_) => unreachable!("broadcast shape is given explicitly"),
            Op::Concat(xs, axis) => {
                let first = sh(xs.first().ok_or_else(|| shape_err(id, name, "no inputs".into()))?)?;
                if *axis >= first.len() {
                    return Err(shape_err(id, name, format!("axis {} of {:?}", axis, first)));
                }
                let mut out = first.to_vec();
                out[*axis] = 0;
                for x in xs {
                    let s = sh(x)?;
                    let compatible = s.len() == first.len()
                        && s.iter().zip(first).enumerate().all(|(d, (p, q))| d == *axis || p == q);
                    if !compatible {
                        return Err(shape_err(id, name, format!("{:?} vs {:?}", s, first)));
                    }
                    out[*axis] += s[*axis];
                }
                Ok(out)
            }
            Op::Slice(a, axis, start, end) => {
                let sa = sh(a)?;
                if *axis >= sa.len() || start >= end || *end > sa[*axis] {
                    return Err(shape_err(id, name, format!("[{}..{}] on axis {} of {:?}", start, end, axis, sa)));
                }
                let mut s = sa.to_vec();
                s[*axis] = end - start;
                Ok(s)
            }
            Op::Clamp(a, lo, hi) => {
                if lo > hi {
                    return Err(shape_err(id, name, format!("empty interval [{}, {}]", lo, hi)));
                }
                Ok(sh(a)?.to_vec())
            }
            Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a) => Ok(sh(a)?.to_vec()),
        }
    }

    fn compute(&self, id: usize) -> Result<Option<Tensor>> {
        let node = &self.nodes[id];
        let op = &node.op;
        let inputs = op.inputs();
        if inputs.iter().any(|v| self.nodes[v.0].value.is_none()) {
            return Ok(None);
        }
        let val = |v: &Var| self.nodes[v.0].value.as_ref().expect("checked above");
        let unary = |a: &Var, f: &dyn Fn(f64) -> f64| val(a).map(f);
        let binary = |a: &Var, b: &Var, f: &dyn Fn(f64, f64) -> f64| val(a).zip_map(val(b), f);
        let out = match op {
            Op::Leaf(_) => return Ok(node.value.clone()),
            Op::Add(a, b) => binary(a, b, &|x, y| x + y)?,
            Op::Sub(a, b) => binary(a, b, &|x, y| x - y)?,
            Op::Mul(a, b) => binary(a, b, &|x, y| x * y)?,
            Op::Div(a, b) => binary(a, b, &|x, y| x / y)?,
            Op::Min(a, b) => binary(a, b, &|x, y| if y < x { y } else { x })?,
            Op::Max(a, b) => binary(a, b, &|x, y| if y > x { y } else { x })?,
            Op::AddScalar(a, c) => unary(a, &|x| x + c),
            Op::MulScalar(a, c) => unary(a, &|x| x * c),
            Op::MatMul(a, b) => val(a).matmul(val(b))?,
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let x = val(a);
                let mean = matches!(op, Op::Mean(..));
                match axis {
                    None => {
                        let s = x.sum();
                        Tensor::scalar(if mean { s / x.len() as f64 } else { s })
                    }
                    Some(ax) => {
                        let (outer, n, inner) = split_axis(x.shape(), *ax);
                        let mut data = vec![0.0; outer * inner];
                        let xd = x.data();
                        for o in 0..outer {
                            for j in 0..n {
                                let src = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
                                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        if mean {
                            data.iter_mut().for_each(|d| *d /= n as f64);
                        }
                        Tensor::new(node.shape.clone(), data)?
                    }
                }
            }
            Op::Broadcast(a) => {
                let x = val(a);
                let xd = x.data();
                let data = match (x.shape(), node.shape.as_slice()) {
                    // bias rows, the common case
                    ([1, c], [r, c2]) if c == c2 => {
                        let mut d = Vec::with_capacity(r * c);
                        for _ in 0..*r {
                            d.extend_from_slice(xd);
                        }
                        d
                    }
                    ([r, 1], [r2, c]) if r == r2 => xd.iter().flat_map(|&v| std::iter::repeat_n(v, *c)).collect(),
                    (from, to) => broadcast_source_indices(from, to).iter().map(|&i| xd[i]).collect(),
                };
                Tensor::new(node.shape.clone(), data)?
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let mut data = Vec::with_capacity(node.shape.iter().product());
                for o in 0..outer {
                    for x in xs {
                        let t = val(x);
                        let chunk = t.shape()[*axis] * inner;
                        data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                Tensor::new(node.shape.clone(), data)?
            }
            Op::Slice(a, axis, start, end) => {
                let x = val(a);
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let mut data = Vec::with_capacity(node.shape.iter().product());
                for o in 0..outer {
                    data.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + end) * inner]);
                }
                Tensor::new(node.shape.clone(), data)?
            }
            Op::Tanh(a) => unary(a, &crate::tensor::tanh),
            Op::Relu(a) => unary(a, &|x| x.max(0.0)),
            Op::Softplus(a) => unary(a, &softplus),
            Op::Exp(a) => unary(a, &f64::exp),
            Op::Log(a) => unary(a, &f64::ln),
            Op::Square(a) => unary(a, &|x| x * x),
            Op::Sqrt(a) => unary(a, &f64::sqrt),
            Op::Clamp(a, lo, hi) => unary(a, &|x| x.clamp(*lo, *hi)),
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { node: id, op: op.name() });
        }
        Ok(Some(out))
    }

    fn push_op(&mut self, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        let shape = self.infer_shape(id, &op)?;
        self.push_with_shape(op, shape)
    }

    fn push_with_shape(&mut self, op: Op, shape: Vec<usize>) -> Result<Var> {
        let id = self.nodes.len();
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            value: None,
            requires_grad,
        });
        match self.compute(id) {
            Ok(v) => {
                self.nodes[id].value = v;
                Ok(Var(id))
            }
            Err(e) => {
                self.nodes.pop();
                Err(e)
            }
        }
    }

    fn check(&self, vs: &[Var]) -> Result<()> {
        for v in vs {
            self.node(*v)?;
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        self.push_op(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        self.push_op(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        self.push_op(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        self.push_op(Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        self.push_op(Op::MatMul(a, b))
    }

    /// Sum of all elements (scalar result).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::Sum(a, None))
    }

    /// Sum over `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::Sum(a, Some(axis)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::Mean(a, None))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::Mean(a, Some(axis)))
    }

    /// Expands size-1 dimensions (or a scalar) to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(&[a])?;
        let from = self.nodes[a.0].shape.clone();
        if !broadcastable(&from, shape) {
            return Err(shape_err(self.nodes.len(), "broadcast", format!("{:?} -> {:?}", from, shape)));
        }
        if from == shape {
            return Ok(a);
        }
        self.push_with_shape(Op::Broadcast(a), shape.to_vec())
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.check(xs)?;
        self.push_op(Op::Concat(xs.to_vec(), axis))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::Slice(a, axis, start, end))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::Sqrt(a))
    }

    /// Clamp to `[lo, hi]`; gradient passes straight through inside the
    /// interval and is zero outside it.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.check(&[a])?;
        self.push_op(Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        self.push_op(Op::Min(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        self.push_op(Op::Max(a, b))
    }

    /// `x · w + b` with `b` a `[1, n]` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let shape = self.shape(xw).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.add(xw, bb)
    }

    /// Multiplies every element by a constant tensor broadcastable to `a`'s shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = self.constant(c);
        let cb = self.broadcast_to(c, &shape)?;
        self.mul(a, cb)
    }

    /// Adds a constant tensor broadcastable to `a`'s shape.
    pub fn add_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = self.constant(c);
        let cb = self.broadcast_to(c, &shape)?;
        self.add(a, cb)
    }

    /// Re-binds leaves and recomputes every node in order.
    pub fn forward(&mut self, bindings: &[(Var, Tensor)]) -> Result<()> {
        for (v, t) in bindings {
            let node = self.nodes.get_mut(v.0).ok_or(Error::UnknownVar(v.0))?;
            if !matches!(node.op, Op::Leaf(_)) {
                return Err(Error::InvalidArgument(format!("node {} is not a leaf", v.0)));
            }
            if node.shape != t.shape() {
                return Err(shape_err(v.0, "bind", format!("{:?} vs {:?}", node.shape, t.shape())));
            }
            node.value = Some(t.clone());
        }
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf(_)) {
                if self.nodes[id].value.is_none() {
                    return Err(Error::InvalidArgument(format!("leaf {} is unbound", id)));
                }
                continue;
            }
            let v = self.compute(id)?;
            self.nodes[id].value = v;
        }
        Ok(())
    }

    /// Reverse pass from `output` seeded with `seed` (same shape as `output`).
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        let out = self.node(output)?;
        if out.value.is_none() {
            return Err(Error::NotEvaluated(output.0));
        }
        if seed.shape() != out.shape.as_slice() {
            return Err(shape_err(output.0, "seed", format!("{:?} vs {:?}", seed.shape(), out.shape)));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(seed);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.value.is_none() {
                return Err(Error::NotEvaluated(id));
            }
            if let Op::Leaf(_) = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            // keep intermediate gradients for chain diagnostics
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|nd| nd.shape.clone()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    /// Scalar-output convenience: seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        let shape = self.node(output)?.shape.clone();
        if shape.iter().product::<usize>() != 1 {
            return Err(shape_err(output.0, "backward", format!("non-scalar output {:?}", shape)));
        }
        self.backward(output, Tensor::ones(&shape))
    }

    /// `∂ sum(output) / ∂ input` with every other leaf held fixed. For
    /// row-independent outputs such as a batch of Q-values this is the
    /// per-row input gradient.
    pub fn grad_wrt_input(&self, output: Var, input: Var) -> Result<Tensor> {
        let node = self.node(input)?;
        if !matches!(node.op, Op::Leaf(LeafKind::Input | LeafKind::Param)) {
            return Err(Error::InvalidArgument(format!(
                "node {} is not a differentiable leaf",
                input.0
            )));
        }
        if input.0 > output.0 {
            return Err(Error::InvalidArgument(format!(
                "input {} does not precede output {}",
                input.0, output.0
            )));
        }
        let seed = Tensor::ones(&self.node(output)?.shape);
        let mut grads = self.backward(output, seed)?;
        Ok(grads.take(input))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let val = |v: &Var| self.nodes[v.0].value.as_ref().expect("forward ran");
        let y = node.value.as_ref().expect("forward ran");
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if rg(b) {
                    self.accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    self.accumulate(grads, *a, g.zip_map(val(b), |g, y| g * y)?);
                }
                if rg(b) {
                    self.accumulate(grads, *b, g.zip_map(val(a), |g, x| g * x)?);
                }
            }
            Op::Div(a, b) => {
                if rg(a) {
                    self.accumulate(grads, *a, g.zip_map(val(b), |g, d| g / d)?);
                }
                if rg(b) {
                    let gb = g.zip_map(y, |g, q| g * q)?.zip_map(val(b), |gq, d| -gq / d)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if rg(a) {
                    // dA = G · B^T
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if rg(b) {
                    // dB = A^T · G
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let x = val(a);
                let mean = matches!(node.op, Op::Mean(..));
                let ga = match axis {
                    None => {
                        let s = if mean { g.item() / x.len() as f64 } else { g.item() };
                        Tensor::full(x.shape(), s)
                    }
                    Some(ax) => {
                        let (outer, n, inner) = split_axis(x.shape(), *ax);
                        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
                        let mut data = Vec::with_capacity(x.len());
                        for o in 0..outer {
                            let src = &g.data()[o * inner..(o + 1) * inner];
                            for _ in 0..n {
                                data.extend(src.iter().map(|v| v * scale));
                            }
                        }
                        Tensor::new(x.shape().to_vec(), data)?
                    }
                };
                self.accumulate(grads, *a, ga);
            }
            Op::Broadcast(a) => {
                let from = &self.nodes[a.0].shape;
                let mut data = vec![0.0; from.iter().product()];
                match (from.as_slice(), node.shape.as_slice()) {
                    ([1, c], [_, c2]) if c == c2 => {
                        for row in g.data().chunks(*c) {
                            data.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    }
                    ([r, 1], [r2, c]) if r == r2 => {
                        for (d, row) in data.iter_mut().zip(g.data().chunks(*c)) {
                            *d = row.iter().sum();
                        }
                    }
                    (from, to) => {
                        for (&i, gv) in broadcast_source_indices(from, to).iter().zip(g.data()) {
                            data[i] += gv;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(from.clone(), data)?);
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                let total = node.shape[*axis] * inner;
                for x in xs {
                    let shape = self.nodes[x.0].shape.clone();
                    let chunk = shape[*axis] * inner;
                    if rg(x) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            data.extend_from_slice(&g.data()[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accumulate(grads, *x, Tensor::new(shape, data)?);
                    }
                    offset += chunk;
                }
            }
            Op::Slice(a, axis, start, end) => {
                let shape = self.nodes[a.0].shape.clone();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let mut data = vec![0.0; shape.iter().product()];
                let w = (end - start) * inner;
                for o in 0..outer {
                    data[(o * n + start) * inner..(o * n + end) * inner]
                        .copy_from_slice(&g.data()[o * w..(o + 1) * w]);
                }
                self.accumulate(grads, *a, Tensor::new(shape, data)?);
            }
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(y, |g, t| g * (1.0 - t * t))?),
            Op::Relu(a) => {
                self.accumulate(grads, *a, g.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 })?)
            }
            Op::Softplus(a) => self.accumulate(grads, *a, g.zip_map(val(a), |g, x| g * sigmoid(x))?),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |g, e| g * e)?),
            Op::Log(a) => self.accumulate(grads, *a, g.zip_map(val(a), |g, x| g / x)?),
            Op::Square(a) => self.accumulate(grads, *a, g.zip_map(val(a), |g, x| 2.0 * g * x)?),
            Op::Sqrt(a) => self.accumulate(grads, *a, g.zip_map(y, |g, s| g / (2.0 * s))?),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga = g.zip_map(val(a), |g, x| if x >= lo && x <= hi { g } else { 0.0 })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (xa, xb) = (val(a), val(b));
                // ties go to the first operand
                let pick_a: Vec<bool> = xa
                    .data()
                    .iter()
                    .zip(xb.data())
                    .map(|(p, q)| if is_min { !(q < p) } else { !(q > p) })
                    .collect();
                let shape = node.shape.clone();
                if rg(a) {
                    let d = g.data().iter().zip(&pick_a).map(|(g, &s)| if s { *g } else { 0.0 }).collect();
                    self.accumulate(grads, *a, Tensor::new(shape.clone(), d)?);
                }
                if rg(b) {
                    let d = g.data().iter().zip(&pick_a).map(|(g, &s)| if s { 0.0 } else { *g }).collect();
                    self.accumulate(grads, *b, Tensor::new(shape, d)?);
                }
            }
        }
        let _ = id;
        Ok(())
    }
}

/// Gradient-check oracle: compares reverse-mode gradients of the scalar
/// function built by `f` against central differences at `point`.
///
/// Returns `max |analytic − numeric| / (|analytic| + step)` over every
/// coordinate of every point tensor.
pub fn finite_difference_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be positive, got {}", step)));
    }
    let mut g = Graph::new();
    let leaves: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &leaves)?;
    let mut grads = g.backward_scalar(out)?;
    let analytic = grads.collect(&leaves);

    let eval = |pt: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = pt.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        let v = g.value(out)?.item();
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite function value in gradient check".into()));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    let mut pt: Vec<Tensor> = point.to_vec();
    for (ti, ga) in analytic.iter().enumerate() {
        for j in 0..pt[ti].len() {
            let orig = pt[ti].data()[j];
            pt[ti].data_mut()[j] = orig + step;
            let fp = eval(&pt)?;
            pt[ti].data_mut()[j] = orig - step;
            let fm = eval(&pt)?;
            pt[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = ga.data()[j];
            worst = worst.max((a - numeric).abs() / (a.abs() + step));
        }
    }
    Ok(worst)
}
