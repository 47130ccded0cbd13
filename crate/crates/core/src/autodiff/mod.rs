//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value; nodes are
//! therefore already in topological order and `backward` is a single reverse
//! sweep. A node is tracked when any of its inputs is tracked, and gradients
//! are only propagated along tracked edges.

pub mod gradcheck;

use crate::error::{ensure, Error, Result};
use crate::tensor::kernels::{self, axis_split, gelu, gelu_grad};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `rhs` shape is a suffix of `lhs` shape and is broadcast over the rest.
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows(..) => "gather_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBroadcast(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(parts, _) => parts.clone(),
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Softmax(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::GatherRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Slice { src, .. } => vec![*src],
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

/// Records primitive applications and runs the reverse sweep.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a node, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A tracked leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// An untracked leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<S>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        let inputs = op.inputs();
        if !value.all_finite() && inputs.iter().all(|&i| self.value(i).all_finite()) {
            return Err(Error::Numerical(format!("{} produced a non-finite value from finite inputs", op.name())));
        }
        let tracked = inputs.iter().any(|&i| self.nodes[i.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (x, y) = (self.value(a), self.value(b));
        Tensor::from_parts(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        self.push(out, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias, positional table).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let x = self.value(a);
        let y = self.value(b).data();
        let m = y.len();
        let data = x.data().iter().enumerate().map(|(i, &v)| v + y[i % m]).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::AddBroadcast(a, b))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(a), axis)?;
        self.push(out, Op::Softmax(a, axis))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, stats) = kernels::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat: stats.xhat, rstd: stats.rstd })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = kernels::permute(self.value(a), axes)?;
        self.push(out, Op::Permute(a, axes.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        ensure!(r >= 2, "transpose needs rank >= 2");
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat(&vals, axis)?;
        self.push(out, Op::Concat(parts.to_vec(), axis))
    }

    /// `a[start..end]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = kernels::slice(self.value(a), axis, start, end)?;
        self.push(out, Op::Slice { src: a, axis, start, end })
    }

    /// Rows of `a` (first axis) at `idx`; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = kernels::gather_rows(self.value(a), idx)?;
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        ensure!(t.numel() > 0, "mean of an empty tensor");
        let out = Tensor::scalar(t.sum() / S::of(t.numel() as f64));
        self.push(out, Op::Mean(a))
    }

    /// `x W + b` for `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_broadcast(y, b)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let root = &self.nodes[loss.0];
        ensure!(root.value.numel() == 1, "backward needs a scalar root, got shape {:?}", root.value.shape());
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.tracked {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Untracked nodes never receive a meaningful gradient.
        for (id, g) in grads.iter_mut().enumerate() {
            if !self.nodes[id].tracked {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let mut send = |v: Var, delta: Tensor<S>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a = *a + d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (da, db) = matmul_backward(av, bv, g);
                if self.nodes[a.0].tracked {
                    send(*a, da);
                }
                if self.nodes[b.0].tracked {
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = Tensor::from_parts(av.shape().to_vec(), gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect());
                let db = Tensor::from_parts(bv.shape().to_vec(), gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect());
                send(*a, da);
                send(*b, db);
            }
            Op::AddBroadcast(a, b) => {
                send(*a, g.clone());
                let bs = self.shape(*b);
                let m: usize = bs.iter().product();
                let mut acc = vec![S::zero(); m];
                for chunk in gd.chunks_exact(m) {
                    for (s, &v) in acc.iter_mut().zip(chunk) {
                        *s = *s + v;
                    }
                }
                send(*b, Tensor::from_parts(bs.to_vec(), acc));
            }
            Op::Scale(a, c) => send(*a, g.map(|v| v * *c)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = gd.iter().zip(x.data()).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                send(*a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                let mut dx = vec![S::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut dot = S::zero();
                        for j in 0..len {
                            dot = dot + gd[at(j)] * yd[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                send(*a, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let rows = gd.len() / d;
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                let mut dx = vec![S::zero(); gd.len()];
                let inv_d = S::of(1.0 / d as f64);
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = S::zero();
                    let mut sum_dh_h = S::zero();
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * hr[j];
                        dgamma[j] = dgamma[j] + gr[j] * hr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        dx[r * d + j] = rstd[r] * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                    }
                }
                let xs = self.shape(*x).to_vec();
                send(*x, Tensor::from_parts(xs, dx));
                send(*gamma, Tensor::from_parts(self.shape(*gamma).to_vec(), dgamma));
                send(*beta, Tensor::from_parts(self.shape(*beta).to_vec(), dbeta));
            }
            Op::Reshape(a) => send(*a, Tensor::from_parts(self.shape(*a).to_vec(), gd.to_vec())),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                send(*a, kernels::permute(g, &inv).expect("inverse permutation"));
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    send(p, kernels::slice(g, *axis, start, start + len).expect("concat slice"));
                    start += len;
                }
            }
            Op::Slice { src: a, axis, start, end } => {
                let src = self.shape(*a);
                let (outer, len, inner) = axis_split(src, *axis);
                let mut dx = vec![S::zero(); src.iter().product()];
                let width = (end - start) * inner;
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    dx[dst..dst + width].copy_from_slice(&gd[o * width..(o + 1) * width]);
                }
                send(*a, Tensor::from_parts(src.to_vec(), dx));
            }
            Op::GatherRows(a, idx) => {
                let src = self.shape(*a);
                let inner: usize = src[1..].iter().product();
                let mut dx = vec![S::zero(); src.iter().product()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..inner {
                        dx[i * inner + j] = dx[i * inner + j] + gd[k * inner + j];
                    }
                }
                send(*a, Tensor::from_parts(src.to_vec(), dx));
            }
            Op::Sum(a) => send(*a, Tensor::full(self.shape(*a), gd[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, Tensor::full(self.shape(*a), gd[0] / S::of(n as f64)));
            }
        }
    }
}

/// Gradients of `C = A B` with respect to `A` and `B`, honouring a shared 2-D `B`.
fn matmul_backward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, g: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    let ra = a.rank();
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let n = b.shape()[b.rank() - 1];
    let batch = a.numel() / (m * k);
    let shared = b.rank() == 2;
    let mut da = vec![S::zero(); a.numel()];
    let mut db = vec![S::zero(); b.numel()];
    for bi in 0..batch {
        let ad = &a.data()[bi * m * k..(bi + 1) * m * k];
        let boff = if shared { 0 } else { bi * k * n };
        let bd = &b.data()[boff..boff + k * n];
        let gdat = &g.data()[bi * m * n..(bi + 1) * m * n];
        // dA = G B^T, summed over j in increasing order for every entry.
        let mut bt = vec![S::zero(); k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = bd[p * n + j];
            }
        }
        crate::tensor::kernels::matmul_into(gdat, &bt, &mut da[bi * m * k..(bi + 1) * m * k], m, n, k);
        let db_b = &mut db[boff..boff + k * n];
        for i in 0..m {
            let grow = &gdat[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let drow = &mut db_b[p * n..(p + 1) * n];
                for (d, &x) in drow.iter_mut().zip(grow) {
                    *d = *d + av * x;
                }
            }
        }
    }
    (Tensor::from_parts(a.shape().to_vec(), da), Tensor::from_parts(b.shape().to_vec(), db))
}
