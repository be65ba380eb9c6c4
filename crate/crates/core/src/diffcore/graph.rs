//! Tape-based reverse-mode differentiation over [`RealArray`] values.
//!
//! Nodes are appended in evaluation order, so node indices are already a
//! topological order and the backward pass is a single reverse sweep.
//! Broadcasting is limited to the leading dimension: a binary elementwise op
//! accepts `[n, c]` with `[1, c]` in either position.

use std::collections::HashMap;

use super::array::{gemm, RealArray};
use super::DiffError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction extent for `sum`, `mean` and `logsumexp`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// All entries, producing `[1, 1]`.
    All,
    /// Across columns within each row, producing `[rows, 1]`.
    PerRow,
}

/// Primitive kinds, as recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Affine,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Log,
    Scale,
    Sum,
    Mean,
    LogSumExp,
    Slice,
    Concat,
    Custom,
}

type BackwardFn = Box<dyn Fn(&RealArray) -> Vec<RealArray>>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Scale(usize, f64),
    Sum(usize, Reduce),
    Mean(usize, Reduce),
    LogSumExp(usize, Reduce),
    Slice(usize, Vec<usize>),
    Concat(Vec<usize>),
    Custom(Vec<usize>, Option<BackwardFn>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Affine(..) => OpKind::Affine,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::LogSumExp(..) => OpKind::LogSumExp,
            Op::Slice(..) => OpKind::Slice,
            Op::Concat(_) => OpKind::Concat,
            Op::Custom(..) => OpKind::Custom,
        }
    }
}

struct Node {
    value: RealArray,
    op: Op,
    requires_grad: bool,
}

/// A computation graph. Confined to one thread; build one per evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints of the leaves that require gradients, keyed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<Var, RealArray>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&RealArray> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<RealArray> {
        self.grads.remove(&v)
    }

    /// Number of nodes whose local rule ran during the backward pass.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn require_matrix(op: &'static str, a: &RealArray) -> Result<(), DiffError> {
    if a.is_matrix() {
        Ok(())
    } else {
        Err(DiffError::NotMatrix {
            op,
            shape: a.shape().to_vec(),
        })
    }
}

fn mismatch(op: &'static str, a: &RealArray, b: &RealArray) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Output shape of a leading-dimension broadcast, if the operands conform.
fn broadcast_shape(a: &RealArray, b: &RealArray) -> Option<(usize, usize)> {
    if a.cols() != b.cols() {
        return None;
    }
    match (a.rows(), b.rows()) {
        (x, y) if x == y => Some((x, a.cols())),
        (1, y) => Some((y, a.cols())),
        (x, 1) => Some((x, a.cols())),
        _ => None,
    }
}

fn binary_elementwise(
    a: &RealArray,
    b: &RealArray,
    rows: usize,
    f: impl Fn(f64, f64) -> f64,
) -> RealArray {
    let c = a.cols();
    let mut out = Vec::with_capacity(rows * c);
    let (ad, bd) = (a.data(), b.data());
    let (a_bc, b_bc) = (a.rows() == 1 && rows != 1, b.rows() == 1 && rows != 1);
    for r in 0..rows {
        let ar = if a_bc { &ad[..c] } else { &ad[r * c..(r + 1) * c] };
        let br = if b_bc { &bd[..c] } else { &bd[r * c..(r + 1) * c] };
        out.extend(ar.iter().zip(br).map(|(&x, &y)| f(x, y)));
    }
    RealArray::matrix(rows, c, out)
}

/// Sums rows of `g` down to `[1, c]` when the operand was broadcast.
fn reduce_to(g: RealArray, rows: usize) -> RealArray {
    if g.rows() == rows {
        return g;
    }
    let c = g.cols();
    let mut out = vec![0.0; c];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    RealArray::matrix(1, c, out)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
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

fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: RealArray, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn param(&mut self, value: RealArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: RealArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &RealArray {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_grad(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn elementwise_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        require_matrix(op, va)?;
        require_matrix(op, vb)?;
        let (rows, _) = broadcast_shape(va, vb).ok_or_else(|| mismatch(op, va, vb))?;
        let out = binary_elementwise(va, vb, rows, f);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, make(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise_binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise_binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise_binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        require_matrix("matmul", va)?;
        require_matrix("matmul", vb)?;
        if va.cols() != vb.rows() {
            return Err(mismatch("matmul", va, vb));
        }
        let out = gemm(va, false, vb, false);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    /// Dense layer `x · w + b` with `b` of shape `[1, out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        require_matrix("affine", vx)?;
        require_matrix("affine", vw)?;
        if vx.cols() != vw.rows() {
            return Err(mismatch("affine", vx, vw));
        }
        if vb.rows() != 1 || vb.cols() != vw.cols() {
            return Err(mismatch("affine", vw, vb));
        }
        let mut out = gemm(vx, false, vw, false);
        let m = out.cols();
        let bias = vb.data();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(bias) {
                *o += bv;
            }
        }
        debug_assert_eq!(m, bias.len());
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Affine(x.0, w.0, b.0), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    /// Rectifier; the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(DiffError::LogDomain(bad));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a.0)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a.0, s))
    }

    fn reduce(&mut self, a: Var, how: Reduce, f: impl Fn(&[f64]) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let out = match how {
            Reduce::All => RealArray::scalar(f(va.data())),
            Reduce::PerRow => {
                let vals = (0..va.rows()).map(|r| f(va.row(r))).collect();
                RealArray::column_vector(vals)
            }
        };
        let rg = self.any_grad(&[a]);
        self.push(out, op, rg)
    }

    pub fn sum(&mut self, a: Var, how: Reduce) -> Var {
        self.reduce(a, how, |xs| xs.iter().sum(), Op::Sum(a.0, how))
    }

    pub fn mean(&mut self, a: Var, how: Reduce) -> Var {
        self.reduce(
            a,
            how,
            |xs| xs.iter().sum::<f64>() / xs.len() as f64,
            Op::Mean(a.0, how),
        )
    }

    pub fn logsumexp(&mut self, a: Var, how: Reduce) -> Var {
        self.reduce(a, how, logsumexp_slice, Op::LogSumExp(a.0, how))
    }

    /// Gathers the listed columns, in order.
    pub fn slice(&mut self, a: Var, cols: &[usize]) -> Result<Var, DiffError> {
        let va = self.value(a);
        require_matrix("slice", va)?;
        if let Some(&bad) = cols.iter().find(|&&c| c >= va.cols()) {
            return Err(DiffError::SliceOutOfRange {
                index: bad,
                shape: va.shape().to_vec(),
            });
        }
        let out = va.select_cols(cols);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Slice(a.0, cols.to_vec()), rg))
    }

    /// Contiguous column range `[start, end)`.
    pub fn slice_range(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let cols: Vec<usize> = (start..end).collect();
        self.slice(a, &cols)
    }

    /// Column-wise concatenation of operands with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts.first().ok_or(DiffError::EmptyConcat)?;
        let rows = self.value(*first).rows();
        for p in parts {
            let v = self.value(*p);
            require_matrix("concat", v)?;
            if v.rows() != rows {
                return Err(mismatch("concat", self.value(*first), v));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = self.any_grad(parts);
        let idx = parts.iter().map(|p| p.0).collect();
        Ok(self.push(RealArray::matrix(rows, total, data), Op::Concat(idx), rg))
    }

    /// Records a node with a caller-supplied value and local gradient rule.
    ///
    /// `backward` maps the node's adjoint to one adjoint per parent, each
    /// with the parent's shape. It is dropped without being called when no
    /// parent requires gradients; callers can check [`Graph::needs_grad`]
    /// to skip preparing it.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: RealArray,
        backward: impl Fn(&RealArray) -> Vec<RealArray> + 'static,
    ) -> Var {
        let rg = self.any_grad(parents);
        let f: Option<BackwardFn> = if rg { Some(Box::new(backward)) } else { None };
        let idx = parents.iter().map(|p| p.0).collect();
        self.push(value, Op::Custom(idx, f), rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(DiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut adj: Vec<Option<RealArray>> = (0..n).map(|_| None).collect();
        adj[root.0] = Some(RealArray::matrix(rv.rows(), rv.cols(), vec![1.0]));
        let mut grads = HashMap::new();
        let mut visited = 0;

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            visited += 1;
            let send = |j: usize, a: RealArray, adj: &mut Vec<Option<RealArray>>| {
                if !self.nodes[j].requires_grad {
                    return;
                }
                match &mut adj[j] {
                    Some(acc) => acc.add_assign(&a),
                    slot @ None => *slot = Some(a),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads.insert(Var(i), g);
                }
                Op::Add(a, b) => {
                    let (ra, rb) = (self.nodes[*a].value.rows(), self.nodes[*b].value.rows());
                    send(*a, reduce_to(g.clone(), ra), &mut adj);
                    send(*b, reduce_to(g, rb), &mut adj);
                }
                Op::Sub(a, b) => {
                    let (ra, rb) = (self.nodes[*a].value.rows(), self.nodes[*b].value.rows());
                    send(*a, reduce_to(g.clone(), ra), &mut adj);
                    send(*b, reduce_to(g.map(|x| -x), rb), &mut adj);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let rows = g.rows();
                    if self.nodes[*a].requires_grad {
                        let ga = binary_elementwise(&g, vb, rows, |x, y| x * y);
                        send(*a, reduce_to(ga, va.rows()), &mut adj);
                    }
                    if self.nodes[*b].requires_grad {
                        let gb = binary_elementwise(&g, va, rows, |x, y| x * y);
                        send(*b, reduce_to(gb, vb.rows()), &mut adj);
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].requires_grad {
                        send(*a, gemm(&g, false, vb, true), &mut adj);
                    }
                    if self.nodes[*b].requires_grad {
                        send(*b, gemm(va, true, &g, false), &mut adj);
                    }
                }
                Op::Affine(x, w, b) => {
                    let (vx, vw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    if self.nodes[*x].requires_grad {
                        send(*x, gemm(&g, false, vw, true), &mut adj);
                    }
                    if self.nodes[*w].requires_grad {
                        send(*w, gemm(vx, true, &g, false), &mut adj);
                    }
                    if self.nodes[*b].requires_grad {
                        send(*b, reduce_to(g, 1), &mut adj);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = zip(&g, y, |gi, yi| gi * (1.0 - yi * yi));
                    send(*a, ga, &mut adj);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = zip(&g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    send(*a, ga, &mut adj);
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[*a].value;
                    send(*a, zip(&g, x, |gi, xi| gi * sigmoid(xi)), &mut adj);
                }
                Op::Exp(a) => {
                    send(*a, zip(&g, &node.value, |gi, yi| gi * yi), &mut adj);
                }
                Op::Log(a) => {
                    let x = &self.nodes[*a].value;
                    send(*a, zip(&g, x, |gi, xi| gi / xi), &mut adj);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    send(*a, g.map(|v| v * s), &mut adj);
                }
                Op::Sum(a, how) | Op::Mean(a, how) => {
                    let x = &self.nodes[*a].value;
                    let per = match (&node.op, how) {
                        (Op::Mean(..), Reduce::All) => 1.0 / x.len() as f64,
                        (Op::Mean(..), Reduce::PerRow) => 1.0 / x.cols() as f64,
                        _ => 1.0,
                    };
                    let c = x.cols();
                    let data = (0..x.len())
                        .map(|k| {
                            let gi = match how {
                                Reduce::All => g.item(),
                                Reduce::PerRow => g.data()[k / c],
                            };
                            gi * per
                        })
                        .collect();
                    send(*a, RealArray::matrix(x.rows(), c, data), &mut adj);
                }
                Op::LogSumExp(a, how) => {
                    let x = &self.nodes[*a].value;
                    let c = x.cols();
                    let data = (0..x.len())
                        .map(|k| {
                            let (gi, lse) = match how {
                                Reduce::All => (g.item(), node.value.item()),
                                Reduce::PerRow => (g.data()[k / c], node.value.data()[k / c]),
                            };
                            if lse == f64::NEG_INFINITY {
                                0.0
                            } else {
                                gi * (x.data()[k] - lse).exp()
                            }
                        })
                        .collect();
                    send(*a, RealArray::matrix(x.rows(), c, data), &mut adj);
                }
                Op::Slice(a, cols) => {
                    let x = &self.nodes[*a].value;
                    let mut ga = RealArray::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let grow = g.row(r);
                        let arow = ga.row_mut(r);
                        for (k, &c) in cols.iter().enumerate() {
                            arow[c] += grow[k];
                        }
                    }
                    send(*a, ga, &mut adj);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        let cols: Vec<usize> = (offset..offset + w).collect();
                        send(p, g.select_cols(&cols), &mut adj);
                        offset += w;
                    }
                }
                Op::Custom(parents, f) => {
                    let f = f.as_ref().expect("custom node requiring grad has a rule");
                    let local = f(&g);
                    debug_assert_eq!(local.len(), parents.len());
                    for (&p, a) in parents.iter().zip(local) {
                        send(p, a, &mut adj);
                    }
                }
            }
        }
        Ok(Gradients { grads, visited })
    }
}

fn zip(g: &RealArray, x: &RealArray, f: impl Fn(f64, f64) -> f64) -> RealArray {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    RealArray::matrix(x.rows(), x.cols(), data)
}
