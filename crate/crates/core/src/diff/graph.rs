use std::borrow::Cow;

use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations accepted by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp<S> {
    Add,
    Sub,
    Mul,
    Scale(S),
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    LogSoftmax(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    /// Scalar output whose Jacobian with respect to `input` was computed
    /// during the forward pass (CTC plugs in here).
    Scalar { input: Var, local_grad: Vec<S> },
}

struct Node<'a, S: Scalar> {
    shape: Vec<usize>,
    value: Cow<'a, [S]>,
    op: Op<S>,
    requires_grad: bool,
}

/// Tape of operations recorded during one forward pass.
///
/// Nodes are appended in execution order, so the tape is already a
/// topological order and `backward` is a single reverse sweep. Leaves may
/// borrow parameter storage; values are never mutated after recording.
pub struct Graph<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / c, c)
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [S]>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf that borrows the tensor's storage and inherits its
    /// `requires_grad` flag.
    pub fn param(&mut self, t: &'a Tensor<S>) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a leaf that owns its values and is never differentiated.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    /// Records an owned leaf that does receive a gradient.
    pub fn variable(&mut self, t: Tensor<S>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<S> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::NotScalar(n.shape.clone()));
        }
        Ok(n.value[0])
    }

    /// Copies a node out as an owned tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// participates in differentiation.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn elementwise(&mut self, op: ElementwiseOp<S>, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = matches!(op, ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul);
        match (need_b, b) {
            (true, Some(b)) => match op {
                ElementwiseOp::Add => self.add(a, b),
                ElementwiseOp::Sub => self.sub(a, b),
                _ => self.mul(a, b),
            },
            (true, None) => Err(Error::InvalidArgument(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(Error::InvalidArgument(format!("{op:?} takes one operand"))),
            (false, None) => Ok(match op {
                ElementwiseOp::Scale(c) => self.scale(a, c),
                ElementwiseOp::Tanh => self.tanh(a),
                ElementwiseOp::Sigmoid => self.sigmoid(a),
                ElementwiseOp::Relu => self.relu(a),
                ElementwiseOp::Exp => self.exp(a),
                _ => self.log(a),
            }),
        }
    }

    /// Result shape of a binary op: exact match, or one side a single element.
    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa == sb {
            return Ok(sa.clone());
        }
        let (na, nb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        if nb == 1 {
            Ok(sa.clone())
        } else if na == 1 {
            Ok(sb.clone())
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: sa.clone(),
                right: sb.clone(),
            })
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let shape = self.binary_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<S> = match (va.len(), vb.len()) {
            (x, y) if x == y => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            (_, 1) => va.iter().map(|&x| f(x, vb[0])).collect(),
            _ => vb.iter().map(|&y| f(va[0], y)).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, Cow::Owned(out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out: Vec<S> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(shape, Cow::Owned(out), op, rg)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, S::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > S::zero() { x } else { S::zero() }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, S::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, S::ln, Op::Log(a))
    }

    /// `[M×K] · [K×N] → [M×N]`. Vectors are not promoted; both inputs must be 2-D.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    /// Adds a `[1×N]` (or `[N]`) bias to every row of an `[M×N]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = rows_cols(&self.nodes[a.0].shape);
        if self.nodes[bias.0].value.len() != c {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[bias.0].shape.clone(),
            });
        }
        let vb = self.value(bias);
        let out: Vec<S> = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(vb).map(|(&x, &b)| x + b))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(shape, Cow::Owned(out), Op::AddBias(a, bias), rg))
    }

    /// Log-softmax over the last axis using a max-shifted log-sum-exp.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, c) = rows_cols(&self.nodes[a.0].shape);
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks(c) {
            let lse = crate::scalar::log_sum_exp(row);
            out.extend(row.iter().map(|&x| x - lse));
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(shape, Cow::Owned(out), Op::LogSoftmax(a), rg)
    }

    /// Rows `start..end` of a 2-D node.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = &self.nodes[a.0].shape;
        if shape.len() != 2 || start >= end || end > shape[0] {
            return Err(Error::InvalidArgument(format!(
                "slice_rows {start}..{end} of {shape:?}"
            )));
        }
        let c = shape[1];
        let out = self.value(a)[start * c..end * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![end - start, c], Cow::Owned(out), Op::SliceRows(a, start), rg))
    }

    /// Columns `start..end` of a 2-D node.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = &self.nodes[a.0].shape;
        if shape.len() != 2 || start >= end || end > shape[1] {
            return Err(Error::InvalidArgument(format!(
                "slice_cols {start}..{end} of {shape:?}"
            )));
        }
        let (r, c) = (shape[0], shape[1]);
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![r, end - start], Cow::Owned(out), Op::SliceCols(a, start), rg))
    }

    /// Stacks 2-D nodes with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let c = self.nodes[first.0].shape[1];
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[1] != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.nodes[first.0].shape.clone(),
                    right: s.clone(),
                });
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], Cow::Owned(out), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins 2-D nodes with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let r = self.nodes[first.0].shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[0] != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[first.0].shape.clone(),
                    right: s.clone(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, total], Cow::Owned(out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Sum of all elements as a one-element node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = S::from_usize(self.value(a).len()).expect("length fits scalar");
        let s = self.sum(a);
        self.scale(s, S::one() / n)
    }

    /// Records a scalar-valued function of `input` whose gradient the caller
    /// has already computed.
    pub fn custom_scalar(&mut self, input: Var, value: S, local_grad: Vec<S>) -> Result<Var> {
        if local_grad.len() != self.value(input).len() {
            return Err(Error::ShapeMismatch {
                op: "custom_scalar",
                left: self.nodes[input.0].shape.clone(),
                right: vec![local_grad.len()],
            });
        }
        let rg = self.rg(input);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![value]),
            Op::Scalar { input, local_grad },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every node that
    /// requires gradients and is reachable from `loss` holds `∂loss/∂node`.
    /// Nodes that do not require gradients never get a buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.rg(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        macro_rules! with_buf {
            ($v:expr, |$b:ident| $body:expr) => {
                if let Some($b) = grad_slot(grads, nodes, $v) {
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -S::one() } else { S::one() };
                with_buf!(*a, |ga| accumulate_broadcast(ga, g, S::one()));
                with_buf!(*b, |gb| accumulate_broadcast(gb, g, sign));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                with_buf!(*a, |ga| accumulate_product(ga, g, vb));
                with_buf!(*b, |gb| accumulate_product(gb, g, va));
            }
            Op::Scale(a, c) => with_buf!(*a, |ga| {
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi * *c;
                }
            }),
            Op::Tanh(a) => with_buf!(*a, |ga| {
                for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(node.value.iter()) {
                    *x += gi * (S::one() - y * y);
                }
            }),
            Op::Sigmoid(a) => with_buf!(*a, |ga| {
                for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(node.value.iter()) {
                    *x += gi * y * (S::one() - y);
                }
            }),
            Op::Relu(a) => with_buf!(*a, |ga| {
                for ((x, &gi), &v) in ga.iter_mut().zip(g).zip(nodes[a.0].value.iter()) {
                    if v > S::zero() {
                        *x += gi;
                    }
                }
            }),
            Op::Exp(a) => with_buf!(*a, |ga| {
                for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(node.value.iter()) {
                    *x += gi * y;
                }
            }),
            Op::Log(a) => with_buf!(*a, |ga| {
                for ((x, &gi), &v) in ga.iter_mut().zip(g).zip(nodes[a.0].value.iter()) {
                    *x += gi / v;
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                // dA = dC · Bᵀ
                with_buf!(*a, |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let brow = &vb[kk * n..(kk + 1) * n];
                            ga[r * k + kk] += dot(grow, brow);
                        }
                    }
                });
                // dB = Aᵀ · dC
                with_buf!(*b, |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let av = va[r * k + kk];
                            if av == S::zero() {
                                continue;
                            }
                            for (x, &gv) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *x += av * gv;
                            }
                        }
                    }
                });
            }
            Op::AddBias(a, bias) => {
                with_buf!(*a, |ga| accumulate_broadcast(ga, g, S::one()));
                with_buf!(*bias, |gb| {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        for (x, &gi) in gb.iter_mut().zip(row) {
                            *x += gi;
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => with_buf!(*a, |ga| {
                let (_, c) = rows_cols(&node.shape);
                for ((gx, gy), y) in ga.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                    let total: S = gy.iter().copied().sum();
                    for ((x, &gi), &yi) in gx.iter_mut().zip(gy).zip(y) {
                        *x += gi - yi.exp() * total;
                    }
                }
            }),
            Op::SliceRows(a, start) => with_buf!(*a, |ga| {
                let c = node.shape[1];
                for (x, &gi) in ga[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *x += gi;
                }
            }),
            Op::SliceCols(a, start) => with_buf!(*a, |ga| {
                let (r, w) = (node.shape[0], node.shape[1]);
                let c = nodes[a.0].shape[1];
                for i in 0..r {
                    for j in 0..w {
                        ga[i * c + start + j] += g[i * w + j];
                    }
                }
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    with_buf!(p, |gp| {
                        for (x, &gi) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *x += gi;
                        }
                    });
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (node.shape[0], node.shape[1]);
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    with_buf!(p, |gp| {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + col + j];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::Sum(a) => with_buf!(*a, |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Scalar { input, local_grad } => with_buf!(*input, |gi| {
                for (x, &l) in gi.iter_mut().zip(local_grad) {
                    *x += g[0] * l;
                }
            }),
        }
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` when `v` is not differentiated.
fn grad_slot<'g, S: Scalar>(
    grads: &'g mut [Option<Vec<S>>],
    nodes: &[Node<'_, S>],
    v: Var,
) -> Option<&'g mut Vec<S>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Row-major `out[M×N] = a[M×K] · b[K×N]`.
fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for kk in 0..k {
            let av = a[r * k + kk];
            if av == S::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// Adds `sign·g` into `dst`, summing when `dst` is a broadcast scalar.
fn accumulate_broadcast<S: Scalar>(dst: &mut [S], g: &[S], sign: S) {
    if dst.len() == g.len() {
        for (x, &gi) in dst.iter_mut().zip(g) {
            *x += sign * gi;
        }
    } else {
        let total: S = g.iter().copied().sum();
        dst[0] += sign * total;
    }
}

/// Product rule for `a ⊙ other`, summing when `dst` is a broadcast scalar.
fn accumulate_product<S: Scalar>(dst: &mut [S], g: &[S], other: &[S]) {
    match (dst.len() == g.len(), other.len() == g.len()) {
        (true, true) => {
            for ((x, &gi), &o) in dst.iter_mut().zip(g).zip(other) {
                *x += gi * o;
            }
        }
        (true, false) => {
            for (x, &gi) in dst.iter_mut().zip(g) {
                *x += gi * other[0];
            }
        }
        (false, true) => {
            dst[0] += g.iter().zip(other).map(|(&gi, &o)| gi * o).sum::<S>();
        }
        (false, false) => dst[0] += g[0] * other[0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec()).unwrap()
    }

    fn mat(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn pointwise_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec_t(&[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let z = g.constant(vec_t(&[0.0]));
        let t = g.tanh(z);
        let s = g.sigmoid(z);
        assert_eq!(g.value(t), &[0.0]);
        assert_eq!(g.value(s), &[0.5]);
    }

    #[test]
    fn binary_shape_mismatch_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(vec_t(&[1.0, 2.0]));
        let b = g.constant(vec_t(&[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
        assert!(g.elementwise(ElementwiseOp::Mul, a, None).is_err());
    }

    #[test]
    fn scalar_broadcast() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(vec_t(&[1.0, 2.0, 3.0]));
        let s = g.variable(Tensor::scalar(2.0));
        let p = g.mul(a, s).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.value(p), &[2.0, 4.0, 6.0]);
        assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.grad(s).unwrap(), &[6.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let a = g.constant(mat(&[&[1.0, 0.0]]));
        let b = g.constant(mat(&[&[0.0], &[5.0]]));
        let q = g.matmul(a, b).unwrap();
        assert_eq!(g.value(q), &[0.0]);
        assert!(g.matmul(a, i2).is_ok());
        assert!(g.matmul(b, b).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        let mut g = Graph::<f64>::new();
        let ln2 = 2f64.ln();
        for (input, expect) in [
            ([0.0, 0.0], [-ln2, -ln2]),
            ([1000.0, 1000.0], [-ln2, -ln2]),
            ([1.0, 0.0], [-0.313_261_687_518_222_8, -1.313_261_687_518_222_8]),
        ] {
            let x = g.constant(vec_t(&input));
            let y = g.log_softmax(x);
            for (a, b) in g.value(y).iter().zip(expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_examples() {
        let w = vec_t(&[0.5, -1.0, 2.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let v = g.param(&w);
        let l = g.sum(v);
        g.backward(l).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(matches!(g.backward(l), Err(Error::BackwardTwice)));

        let w = vec_t(&[1.0, 2.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let v = g.param(&w);
        let sq = g.mul(v, v).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_buffer() {
        let frozen = vec_t(&[1.0, 2.0]);
        let live = vec_t(&[3.0, 4.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let f = g.param(&frozen);
        let l = g.param(&live);
        let p = g.mul(f, l).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(f).is_none());
        assert_eq!(g.grad(l).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(vec_t(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn slices_and_concats_route_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(mat(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let c = g.slice_cols(x, 1, 3).unwrap();
        assert_eq!(g.value(c), &[2.0, 3.0, 5.0, 6.0]);
        let r = g.slice_rows(x, 1, 2).unwrap();
        assert_eq!(g.value(r), &[4.0, 5.0, 6.0]);
        let rr = g.concat_rows(&[r, r]).unwrap();
        let cc = g.concat_cols(&[c, x]).unwrap();
        assert_eq!(g.shape(cc), &[2, 5]);
        let s1 = g.sum(rr);
        let s2 = g.sum(cc);
        let l = g.add(s1, s2).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0, 2.0, 3.0, 4.0, 4.0]);
    }
}
