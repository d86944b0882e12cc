//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] evaluates every operation eagerly and records it as a node.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Tapes are built for one forward pass and then dropped.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numkit::kernels;
use crate::numkit::linalg;
use crate::numkit::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Tanh,
    Negate,
}

/// Second operand of a binary [`ElemOp`].
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    Neg(Var),
    Broadcast(Var),
    SumTo(Var),
    Conv1x1(Var, Var),
    Conv3x3(Var, Var),
    ChannelMean(Var),
    Gather(Var, Arc<[usize]>),
    Scatter(Var, Arc<[usize]>),
    Bmm(Var, Var),
    LogAbsDet(Var, Tensor),
    SoftmaxLast(Var),
    LogSumExp(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of evaluated operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: if needs_grad { kind } else { Op::Leaf },
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copy of `v` that is cut off from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        self.value(a).zip_map(self.value(b), f).expect("shapes checked")
    }

    /// Dispatch a pointwise op; unary kinds ignore `rhs`.
    pub fn elementwise(&mut self, kind: ElemOp, a: Var, rhs: Option<Operand>) -> Result<Var> {
        let need = |rhs: Option<Operand>| {
            rhs.ok_or_else(|| Error::domain("elementwise", format!("{kind:?} needs a second operand")))
        };
        match kind {
            ElemOp::Add => match need(rhs)? {
                Operand::Var(b) => self.add(a, b),
                Operand::Scalar(s) => self.add_scalar(a, s),
            },
            ElemOp::Sub => match need(rhs)? {
                Operand::Var(b) => self.sub(a, b),
                Operand::Scalar(s) => self.add_scalar(a, -s),
            },
            ElemOp::Mul => match need(rhs)? {
                Operand::Var(b) => self.mul(a, b),
                Operand::Scalar(s) => self.mul_scalar(a, s),
            },
            ElemOp::Div => match need(rhs)? {
                Operand::Var(b) => self.div(a, b),
                Operand::Scalar(s) => {
                    if s == 0.0 {
                        return Err(Error::domain("div", "division by zero scalar"));
                    }
                    self.mul_scalar(a, 1.0 / s)
                }
            },
            ElemOp::Exp => self.exp(a),
            ElemOp::Log => self.log(a),
            ElemOp::Sigmoid => self.sigmoid(a),
            ElemOp::Softplus => self.softplus(a),
            ElemOp::Tanh => self.tanh(a),
            ElemOp::Negate => self.neg(a),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        if let Some(k) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(Error::domain("div", format!("zero divisor at flat index {k}")));
        }
        let v = self.zip(a, b, |x, y| x / y);
        self.push("div", v, Op::Div(a, b), &[a, b])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("mul_scalar", v, Op::MulScalar(a, s), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(k) = self.value(a).data().iter().position(|&v| v <= 0.0) {
            return Err(Error::domain("log", format!("non-positive operand at flat index {k}")));
        }
        let v = self.value(a).map(f64::ln);
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::softplus);
        self.push("softplus", v, Op::Softplus(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push("tanh", v, Op::Tanh(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| -x);
        self.push("neg", v, Op::Neg(a), &[a])
    }

    /// `log σ(a) = -softplus(-a)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        let s = self.softplus(n)?;
        self.neg(s)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Expand size-1 axes of `a` to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: Shape) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = kernels::broadcast_to(self.value(a), shape)?;
        self.push("broadcast_to", v, Op::Broadcast(a), &[a])
    }

    /// Sum over every axis where `shape` has extent 1 (adjoint of broadcast).
    pub fn sum_to(&mut self, a: Var, shape: Shape) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = kernels::sum_to(self.value(a), shape)?;
        self.push("sum_to", v, Op::SumTo(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.sum_to(a, Shape::SCALAR)
    }

    /// Per-sample totals, shape (B, 1, 1, 1).
    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        let b = self.shape(a).b();
        self.sum_to(a, Shape::new(b, 1, 1, 1))
    }

    /// `a ⊙ broadcast(b)`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        let bb = self.broadcast_to(b, s)?;
        self.mul(a, bb)
    }

    /// `a + broadcast(b)`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        let bb = self.broadcast_to(b, s)?;
        self.add(a, bb)
    }

    /// Multiply by a constant tensor (for masks).
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let k = self.constant(c.clone())?;
        self.mul_bcast(a, k)
    }

    pub fn conv1x1(&mut self, x: Var, w: Var) -> Result<Var> {
        let v = kernels::conv1x1(self.value(x), self.value(w))?;
        self.push("conv1x1", v, Op::Conv1x1(x, w), &[x, w])
    }

    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let v = kernels::conv3x3(self.value(x), self.value(w))?;
        self.push("conv3x3", v, Op::Conv3x3(x, w), &[x, w])
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let v = kernels::channel_mean(self.value(x));
        self.push("channel_mean", v, Op::ChannelMean(x), &[x])
    }

    /// `out[k] = x[index[k]]` with output shape `shape`.
    pub fn gather(&mut self, x: Var, shape: Shape, index: Arc<[usize]>) -> Result<Var> {
        if index.len() != shape.numel() {
            return Err(Error::domain("gather", "index table length differs from output size"));
        }
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::domain("gather", format!("index {bad} out of range")));
        }
        let v = Tensor::new(shape, index.iter().map(|&i| src[i]).collect())?;
        self.push("gather", v, Op::Gather(x, index), &[x])
    }

    /// `out[index[k]] += x[k]`, zeros elsewhere (adjoint of gather).
    pub fn scatter(&mut self, x: Var, shape: Shape, index: Arc<[usize]>) -> Result<Var> {
        let src = self.value(x).data();
        if index.len() != src.len() {
            return Err(Error::domain("scatter", "index table length differs from input size"));
        }
        let mut out = vec![0.0; shape.numel()];
        for (&i, &v) in index.iter().zip(src) {
            if i >= out.len() {
                return Err(Error::domain("scatter", format!("index {i} out of range")));
            }
            out[i] += v;
        }
        let v = Tensor::new(shape, out)?;
        self.push("scatter", v, Op::Scatter(x, index), &[x])
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.c() {
            return Err(Error::domain("slice_channels", format!("{start}+{len} exceeds {}", s.c())));
        }
        let os = s.with_channels(len);
        let index: Arc<[usize]> = (0..os.numel())
            .map(|k| {
                let [b, c, i, j] = os.unravel(k);
                s.offset(b, start + c, i, j)
            })
            .collect();
        self.gather(x, os, index)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]);
        let total: usize = parts.iter().map(|&p| self.shape(p).c()).sum();
        let os = first.with_channels(total);
        let mut acc: Option<Var> = None;
        let mut offset = 0;
        for &p in parts {
            let ps = self.shape(p);
            if ps.with_channels(1) != first.with_channels(1) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: first,
                    right: ps,
                });
            }
            let index: Arc<[usize]> = (0..ps.numel())
                .map(|k| {
                    let [b, c, i, j] = ps.unravel(k);
                    os.offset(b, offset + c, i, j)
                })
                .collect();
            let placed = self.scatter(p, os, index)?;
            acc = Some(match acc {
                None => placed,
                Some(a) => self.add(a, placed)?,
            });
            offset += ps.c();
        }
        Ok(acc.expect("at least one part"))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let os = Shape::new(s.b(), s.c(), s.w(), s.h());
        let index: Arc<[usize]> = (0..os.numel())
            .map(|k| {
                let [b, c, i, j] = os.unravel(k);
                s.offset(b, c, j, i)
            })
            .collect();
        self.gather(x, os, index)
    }

    /// Batched matrix product of the trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::bmm(self.value(a), self.value(b))?;
        self.push("bmm", v, Op::Bmm(a, b), &[a, b])
    }

    /// `log |det|` of each trailing square matrix; output (B, G, 1, 1).
    pub fn logabsdet(&mut self, a: Var) -> Result<Var> {
        let (v, inv_t) = linalg::batched_logabsdet(self.value(a))?;
        self.push("logabsdet", v, Op::LogAbsDet(a, inv_t), &[a])
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let v = kernels::softmax_last(self.value(a));
        self.push("softmax_last", v, Op::SoftmaxLast(a), &[a])
    }

    /// Pointwise `log Σ_k exp(x_k)` over equal-shaped operands.
    pub fn logsumexp(&mut self, xs: &[Var]) -> Result<Var> {
        let s = self.shape(xs[0]);
        for &x in &xs[1..] {
            self.same_shape("logsumexp", xs[0], x)?;
        }
        let n = s.numel();
        let mut out = vec![0.0; n];
        for (k, o) in out.iter_mut().enumerate() {
            let m = xs
                .iter()
                .map(|&x| self.value(x).data()[k])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = xs.iter().map(|&x| (self.value(x).data()[k] - m).exp()).sum();
            *o = m + sum.ln();
        }
        let v = Tensor::new(s, out)?;
        self.push("logsumexp", v, Op::LogSumExp(xs.to_vec()), xs)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Backward(format!("root {} is not on this tape", root.0)));
        }
        let rs = self.shape(root);
        if rs.numel() != 1 {
            return Err(Error::Backward(format!("root must be scalar, got shape {rs}")));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(rs));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let y = &node.value;
            let push = |grads: &mut Vec<Option<Tensor>>, v: Var, t: Tensor| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    push(&mut grads, *a, g.clone());
                    push(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    push(&mut grads, *b, g.map(|v| -v));
                    push(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(*b), |g, b| g * b)?;
                    let gb = g.zip_map(val(*a), |g, a| g * a)?;
                    push(&mut grads, *a, ga);
                    push(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let ga = g.zip_map(val(*b), |g, b| g / b)?;
                    let t = g.zip_map(y, |g, y| g * y)?;
                    let gb = t.zip_map(val(*b), |t, b| -t / b)?;
                    push(&mut grads, *a, ga);
                    push(&mut grads, *b, gb);
                }
                Op::AddScalar(a) => push(&mut grads, *a, g),
                Op::MulScalar(a, s) => {
                    let s = *s;
                    push(&mut grads, *a, g.map(|v| v * s));
                }
                Op::Exp(a) => push(&mut grads, *a, g.zip_map(y, |g, y| g * y)?),
                Op::Log(a) => push(&mut grads, *a, g.zip_map(val(*a), |g, x| g / x)?),
                Op::Sigmoid(a) => push(&mut grads, *a, g.zip_map(y, |g, y| g * y * (1.0 - y))?),
                Op::Softplus(a) => {
                    push(&mut grads, *a, g.zip_map(val(*a), |g, x| g * kernels::sigmoid(x))?)
                }
                Op::Tanh(a) => push(&mut grads, *a, g.zip_map(y, |g, y| g * (1.0 - y * y))?),
                Op::Neg(a) => push(&mut grads, *a, g.map(|v| -v)),
                Op::Broadcast(a) => push(&mut grads, *a, kernels::sum_to(&g, val(*a).shape())?),
                Op::SumTo(a) => push(&mut grads, *a, kernels::broadcast_to(&g, val(*a).shape())?),
                Op::Conv1x1(x, w) => {
                    let (gx, gw) = kernels::conv1x1_backward(val(*x), val(*w), &g);
                    push(&mut grads, *x, gx);
                    push(&mut grads, *w, gw);
                }
                Op::Conv3x3(x, w) => {
                    let (gx, gw) = kernels::conv3x3_backward(val(*x), val(*w), &g);
                    push(&mut grads, *x, gx);
                    push(&mut grads, *w, gw);
                }
                Op::ChannelMean(x) => {
                    let xs = val(*x).shape();
                    let inv = 1.0 / xs.c() as f64;
                    let b = kernels::broadcast_to(&g, xs)?;
                    push(&mut grads, *x, b.map(|v| v * inv));
                }
                Op::Gather(x, index) => {
                    let mut gx = vec![0.0; val(*x).data().len()];
                    for (&i, &gv) in index.iter().zip(g.data()) {
                        gx[i] += gv;
                    }
                    push(&mut grads, *x, Tensor::new(val(*x).shape(), gx)?);
                }
                Op::Scatter(x, index) => {
                    let gx = index.iter().map(|&i| g.data()[i]).collect();
                    push(&mut grads, *x, Tensor::new(val(*x).shape(), gx)?);
                }
                Op::Bmm(a, b) => {
                    let (ga, gb) = kernels::bmm_backward(val(*a), val(*b), &g)?;
                    push(&mut grads, *a, ga);
                    push(&mut grads, *b, gb);
                }
                Op::LogAbsDet(a, inv_t) => {
                    let s = inv_t.shape();
                    let gb = kernels::broadcast_to(&g, s)?;
                    push(&mut grads, *a, gb.zip_map(inv_t, |g, w| g * w)?);
                }
                Op::SoftmaxLast(a) => push(&mut grads, *a, kernels::softmax_last_backward(y, &g)),
                Op::LogSumExp(xs) => {
                    for &x in xs {
                        let t = val(x).zip_map(y, |x, y| (x - y).exp())?;
                        push(&mut grads, x, t.zip_map(&g, |w, g| w * g)?);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}
