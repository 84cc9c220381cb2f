//! Arena tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its value. The backward pass in
//! [`Tape::backward`] is itself expressed with the same ops, so a gradient
//! graph can be differentiated again (reverse-over-reverse). Nodes are
//! processed strictly in creation order, which keeps evaluation bit-for-bit
//! reproducible.

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};

use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    /// `[n] -> [m, n]`
    BroadcastRows(NodeId),
    /// `[m, n] -> [n]`
    SumRows(NodeId),
    /// `[m] -> [m, n]`
    BroadcastCols(NodeId),
    /// `[m, n] -> [m]`
    SumCols(NodeId),
    /// `[1] -> any shape`
    Expand(NodeId),
    /// `any -> [1]`
    Sum(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    /// Row-wise log-softmax of a matrix.
    LogSoftmax(NodeId),
}

impl Op {
    fn inputs(&self) -> [Option<NodeId>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => [Some(a), Some(b)],
            Neg(a)
            | Scale(a, _)
            | AddScalar(a, _)
            | Transpose(a)
            | Reshape(a)
            | BroadcastRows(a)
            | SumRows(a)
            | BroadcastCols(a)
            | SumCols(a)
            | Expand(a)
            | Sum(a)
            | Tanh(a)
            | Sigmoid(a)
            | Softplus(a)
            | Exp(a)
            | Relu(a)
            | LogSoftmax(a) => [Some(a), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    error: Option<String>,
}

/// Recording arena. Not `Sync`; each thread builds its own tape.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes held by node values.
    pub fn nbytes(&self) -> usize {
        self.inner
            .borrow()
            .nodes
            .iter()
            .map(|n| n.value.nbytes())
            .sum()
    }

    /// First shape error recorded by an op, if any.
    pub fn error(&self) -> Option<String> {
        self.inner.borrow().error.clone()
    }

    pub(crate) fn truncate(&self, len: usize) {
        self.inner.borrow_mut().nodes.truncate(len);
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }

    pub fn var(&self, id: NodeId) -> Var<'_> {
        assert!(id < self.len(), "node {id} is not on this tape");
        Var { tape: self, id }
    }

    /// Adds an input node. Parameters and data are both leaves; only the
    /// leaves passed to [`Tape::backward`] receive gradients.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value)
    }

    fn push(&self, op: Op, value: Tensor) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { op, value });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.inner.borrow().nodes[id].value.shape().to_vec()
    }

    /// Records a shape error and returns a placeholder so expression code can
    /// keep going; callers check [`Tape::error`] after evaluation.
    fn fail(&self, msg: String) -> Var<'_> {
        {
            let mut inner = self.inner.borrow_mut();
            if inner.error.is_none() {
                inner.error = Some(msg);
            }
        }
        self.push(Op::Leaf, Tensor::scalar(0.0))
    }

    fn unary(&self, a: NodeId, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'_> {
        let value = f(&self.inner.borrow().nodes[a].value);
        self.push(op, value)
    }

    fn binary_same(
        &self,
        a: NodeId,
        b: NodeId,
        op: Op,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Var<'_> {
        let value = {
            let inner = self.inner.borrow();
            let (x, y) = (&inner.nodes[a].value, &inner.nodes[b].value);
            if x.shape() != y.shape() {
                let msg = format!("{name}: {:?} vs {:?}", x.shape(), y.shape());
                drop(inner);
                return self.fail(msg);
            }
            x.zip_map(y, f)
        };
        self.push(op, value)
    }

    /// Reverse pass from scalar `output`, recorded on this tape.
    ///
    /// Returns one gradient node per entry of `wrt`, in order. Leaves with no
    /// path to `output` get a zero constant of their own shape.
    pub fn backward(&self, output: NodeId, wrt: &[NodeId]) -> Vec<NodeId> {
        let seed = self
            .constant(Tensor::filled(&self.shape_of(output), 1.0))
            .id;
        self.backward_from(output, seed, wrt)
    }

    pub(crate) fn backward_from(
        &self,
        output: NodeId,
        seed: NodeId,
        wrt: &[NodeId],
    ) -> Vec<NodeId> {
        let ops: Vec<Op> = self.inner.borrow().nodes[..=output]
            .iter()
            .map(|n| n.op)
            .collect();

        let mut relevant = vec![false; output + 1];
        for &w in wrt {
            if w <= output {
                relevant[w] = true;
            }
        }
        for (i, op) in ops.iter().enumerate() {
            if op.inputs().iter().flatten().any(|&j| relevant[j]) {
                relevant[i] = true;
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; output + 1];
        grads[output] = Some(seed);
        for i in (0..=output).rev() {
            let Some(g) = grads[i] else { continue };
            if !relevant[i] {
                continue;
            }
            for (input, contrib) in self.vjp(i, ops[i], g) {
                if !relevant[input] {
                    continue;
                }
                grads[input] = Some(match grads[input] {
                    None => contrib,
                    Some(prev) => (self.var(prev) + self.var(contrib)).id,
                });
            }
        }

        wrt.iter()
            .map(|&w| match grads.get(w).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&self.shape_of(w))).id,
            })
            .collect()
    }

    /// Vector-Jacobian rule for node `y`, built only from tape ops.
    fn vjp(&self, y: NodeId, op: Op, g: NodeId) -> Vec<(NodeId, NodeId)> {
        use Op::*;
        let gv = self.var(g);
        let yv = self.var(y);
        match op {
            Leaf => vec![],
            Add(a, b) => vec![(a, g), (b, g)],
            Sub(a, b) => vec![(a, g), (b, (-gv).id)],
            Mul(a, b) => vec![(a, (gv * self.var(b)).id), (b, (gv * self.var(a)).id)],
            Neg(a) => vec![(a, (-gv).id)],
            Scale(a, c) => vec![(a, gv.scale(c).id)],
            AddScalar(a, _) => vec![(a, g)],
            MatMul(a, b) => vec![
                (a, gv.matmul(self.var(b).t()).id),
                (b, self.var(a).t().matmul(gv).id),
            ],
            Transpose(a) => vec![(a, gv.t().id)],
            Reshape(a) => vec![(a, gv.reshape(&self.shape_of(a)).id)],
            BroadcastRows(a) => vec![(a, gv.sum_rows().id)],
            SumRows(a) => vec![(a, gv.broadcast_rows(self.shape_of(a)[0]).id)],
            BroadcastCols(a) => vec![(a, gv.sum_cols().id)],
            SumCols(a) => vec![(a, gv.broadcast_cols(self.shape_of(a)[1]).id)],
            Expand(a) => vec![(a, gv.sum().id)],
            Sum(a) => vec![(a, gv.expand(&self.shape_of(a)).id)],
            Tanh(a) => {
                let d = (-(yv * yv)).add_scalar(1.0);
                vec![(a, (gv * d).id)]
            }
            Sigmoid(a) => {
                let d = yv * (-yv).add_scalar(1.0);
                vec![(a, (gv * d).id)]
            }
            Softplus(a) => vec![(a, (gv * self.var(a).sigmoid()).id)],
            Exp(a) => vec![(a, (gv * yv).id)],
            Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(a, (gv * self.constant(mask)).id)]
            }
            LogSoftmax(a) => {
                let n = self.shape_of(a)[1];
                let soft = yv.exp();
                let rows = gv.sum_cols().broadcast_cols(n);
                vec![(a, (gv - soft * rows).id)]
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Scale(self.id, c), |x| x.scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::AddScalar(self.id, c), |x| x.map(|v| v + c))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return self.tape.fail(format!("matmul: {sa:?} x {sb:?}"));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            matmul(&inner.nodes[self.id].value, &inner.nodes[other.id].value)
        };
        self.tape.push(Op::MatMul(self.id, other.id), value)
    }

    pub fn t(self) -> Var<'t> {
        let s = self.shape();
        if s.len() != 2 {
            return self.tape.fail(format!("transpose of {s:?}"));
        }
        self.tape.unary(self.id, Op::Transpose(self.id), transpose)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let value = match self.value().reshape(shape.to_vec()) {
            Ok(v) => v,
            Err(e) => return self.tape.fail(e.to_string()),
        };
        self.tape.push(Op::Reshape(self.id), value)
    }

    /// Repeats a vector `[n]` as `rows` identical rows.
    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        let s = self.shape();
        if s.len() != 1 {
            return self.tape.fail(format!("broadcast_rows of {s:?}"));
        }
        let value = {
            let x = self.value();
            let mut data = Vec::with_capacity(rows * x.len());
            for _ in 0..rows {
                data.extend_from_slice(x.data());
            }
            Tensor::new(vec![rows, x.len()], data).unwrap()
        };
        self.tape.push(Op::BroadcastRows(self.id), value)
    }

    /// Column sums of a matrix, `[m, n] -> [n]`.
    pub fn sum_rows(self) -> Var<'t> {
        let s = self.shape();
        if s.len() != 2 {
            return self.tape.fail(format!("sum_rows of {s:?}"));
        }
        self.tape.unary(self.id, Op::SumRows(self.id), |x| {
            let (m, n) = (s[0], s[1]);
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, v) in out.iter_mut().zip(&x.data()[i * n..(i + 1) * n]) {
                    *o += v;
                }
            }
            Tensor::vector(out)
        })
    }

    /// Repeats a vector `[m]` across `cols` columns.
    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        let s = self.shape();
        if s.len() != 1 {
            return self.tape.fail(format!("broadcast_cols of {s:?}"));
        }
        self.tape.unary(self.id, Op::BroadcastCols(self.id), |x| {
            let data = x
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, cols))
                .collect();
            Tensor::new(vec![x.len(), cols], data).unwrap()
        })
    }

    /// Row sums of a matrix, `[m, n] -> [m]`.
    pub fn sum_cols(self) -> Var<'t> {
        let s = self.shape();
        if s.len() != 2 {
            return self.tape.fail(format!("sum_cols of {s:?}"));
        }
        self.tape.unary(self.id, Op::SumCols(self.id), |x| {
            let n = s[1];
            Tensor::vector(x.data().chunks(n).map(|r| r.iter().sum()).collect())
        })
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(self, shape: &[usize]) -> Var<'t> {
        let s = self.shape();
        if s.iter().product::<usize>() != 1 {
            return self.tape.fail(format!("expand of {s:?}"));
        }
        self.tape.unary(self.id, Op::Expand(self.id), |x| {
            Tensor::filled(shape, x.data()[0])
        })
    }

    pub fn sum(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Sum(self.id), |x| Tensor::scalar(x.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.shape().iter().product::<usize>() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Tanh(self.id), |x| x.map(f64::tanh))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Sigmoid(self.id), |x| x.map(sigmoid))
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Softplus(self.id), |x| x.map(softplus))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Exp(self.id), |x| x.map(f64::exp))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Relu(self.id), |x| x.map(|v| v.max(0.0)))
    }

    pub fn log_softmax(self) -> Var<'t> {
        let s = self.shape();
        if s.len() != 2 {
            return self.tape.fail(format!("log_softmax of {s:?}"));
        }
        self.tape.unary(self.id, Op::LogSoftmax(self.id), |x| {
            let n = s[1];
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            Tensor::new(s.clone(), out).unwrap()
        })
    }

    /// `x · W + b` for `x: [m, k]`, `W: [k, n]`, `b: [n]`.
    pub fn affine(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let xw = self.matmul(weight);
        let rows = xw.shape()[0];
        xw + bias.broadcast_rows(rows)
    }

    /// `Σ self ⊙ other` as a one-element tensor.
    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        (self * other).sum()
    }

    /// Multiplies every entry by a one-element node.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        let shape = self.shape();
        self * s.expand(&shape)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary_same(self.id, rhs.id, Op::Add(self.id, rhs.id), "add", |a, b| {
                a + b
            })
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary_same(self.id, rhs.id, Op::Sub(self.id, rhs.id), "sub", |a, b| {
                a - b
            })
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary_same(self.id, rhs.id, Op::Mul(self.id, rhs.id), "mul", |a, b| {
                a * b
            })
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Neg(self.id), |x| x.map(|v| -v))
    }
}
