//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation on a [`Var`]
//! pushes a node holding its value and, when any parent is trainable, the
//! information needed to propagate gradients. Nodes whose parents are all
//! constant are stored as plain leaves, so a graph built only from constants
//! doubles as a no-grad inference path.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Variance floor used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddTiled { a: usize, b: usize },
    MulTiled { a: usize, b: usize },
    GroupAdd { x: usize, s: usize, rows: usize },
    GroupMul { x: usize, s: usize, rows: usize },
    Scale { a: usize, c: T },
    AddScalar { a: usize },
    Gelu { a: usize },
    Silu { a: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    LayerNorm { a: usize, rstd: Vec<T> },
    Embedding { table: usize, ids: Vec<usize> },
    Gather { a: usize, ids: Vec<usize> },
    SplitHeads { a: usize, batch: usize, seq: usize, heads: usize, dh: usize },
    MergeHeads { a: usize, batch: usize, seq: usize, heads: usize, dh: usize },
    SliceRows { a: usize, start: usize },
    Reshape { a: usize },
    Sum { a: usize },
    Mean { a: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape. Dropped after use; leaf gradients live until then.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<HashMap<usize, Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T: Scalar> {
    g: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn last(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, parents: &[usize]) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a tensor, tracking gradients iff the tensor requires them.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Registers a tensor as a trainable leaf regardless of its flag.
    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn constant(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(dim_err("constant", shape, &[data.len()]));
        }
        Ok(self.push_leaf(shape.to_vec(), data, false))
    }

    pub fn constant_tensor(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Gradient accumulated into a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Vec<T>> {
        self.leaf_grads.borrow().get(&v.id).cloned()
    }

    /// Adds the leaf gradient of `v` into `t`'s gradient slot.
    pub fn accumulate_into(&self, v: Var<'_, T>, t: &mut Tensor<T>) -> Result<()> {
        match self.leaf_grads.borrow().get(&v.id) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    /// Propagates d(root)/d(node) to every trainable leaf. Repeated calls add.
    pub fn backward(&self, root: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let rn = &nodes[root.id];
        if rn.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar root, got shape {:?}",
                rn.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(vec![T::one()]);
        let mut leaves = self.leaf_grads.borrow_mut();

        for id in (0..=root.id).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, &mut grads, &mut leaves, id, node, &gy);
        }
        Ok(())
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }
}

/// Mutable gradient buffer for a parent, allocated on first use.
fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let k = T::c(0.044715);
    let half = T::c(0.5);
    let u = c * (x + k * x * x * x);
    // one exp instead of libm tanh; saturates cleanly to +-1
    let th = T::one() - T::c(2.0) / ((u + u).exp() + T::one());
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::c(3.0) * k * x * x);
    (y, dy)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[allow(clippy::too_many_lines)]
fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    leaves: &mut HashMap<usize, Vec<T>>,
    id: usize,
    node: &Node<T>,
    gy: &[T],
) {
    match &node.op {
        Op::Leaf => {
            let buf = leaves
                .entry(id)
                .or_insert_with(|| vec![T::zero(); gy.len()]);
            for (b, &g) in buf.iter_mut().zip(gy) {
                *b += g;
            }
        }
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(da) = slot(grads, nodes, a) {
                // dA += dC * B^T
                T::gemm(m, n, k, T::one(), gy, n as isize, 1, &nodes[b].value, 1, n as isize, T::one(), da, k as isize, 1);
            }
            if let Some(db) = slot(grads, nodes, b) {
                // dB += A^T * dC
                T::gemm(k, m, n, T::one(), &nodes[a].value, 1, k as isize, gy, n as isize, 1, T::one(), db, n as isize, 1);
            }
        }
        &Op::Bmm { a, b, batch, m, k, n, trans_b } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if let Some(da) = slot(grads, nodes, a) {
                for i in 0..batch {
                    let g = &gy[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    let d = &mut da[i * m * k..(i + 1) * m * k];
                    if trans_b {
                        // C = A B^T with B stored n x k: dA += dC B
                        T::gemm(m, n, k, T::one(), g, n as isize, 1, bi, k as isize, 1, T::one(), d, k as isize, 1);
                    } else {
                        T::gemm(m, n, k, T::one(), g, n as isize, 1, bi, 1, n as isize, T::one(), d, k as isize, 1);
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                for i in 0..batch {
                    let g = &gy[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let d = &mut db[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        // dB (n x k) += dC^T A
                        T::gemm(n, m, k, T::one(), g, 1, n as isize, ai, k as isize, 1, T::one(), d, k as isize, 1);
                    } else {
                        T::gemm(k, m, n, T::one(), ai, 1, k as isize, g, n as isize, 1, T::one(), d, n as isize, 1);
                    }
                }
            }
        }
        &Op::Add { a, b } => {
            if let Some(da) = slot(grads, nodes, a) {
                da.iter_mut().zip(gy).for_each(|(d, &g)| *d += g);
            }
            if let Some(db) = slot(grads, nodes, b) {
                db.iter_mut().zip(gy).for_each(|(d, &g)| *d += g);
            }
        }
        &Op::Sub { a, b } => {
            if let Some(da) = slot(grads, nodes, a) {
                da.iter_mut().zip(gy).for_each(|(d, &g)| *d += g);
            }
            if let Some(db) = slot(grads, nodes, b) {
                db.iter_mut().zip(gy).for_each(|(d, &g)| *d -= g);
            }
        }
        &Op::Mul { a, b } => {
            if let Some(da) = slot(grads, nodes, a) {
                let bv = &nodes[b].value;
                for ((d, &g), &y) in da.iter_mut().zip(gy).zip(bv) {
                    *d += g * y;
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                let av = &nodes[a].value;
                for ((d, &g), &x) in db.iter_mut().zip(gy).zip(av) {
                    *d += g * x;
                }
            }
        }
        &Op::AddTiled { a, b } => {
            if let Some(da) = slot(grads, nodes, a) {
                da.iter_mut().zip(gy).for_each(|(d, &g)| *d += g);
            }
            if let Some(db) = slot(grads, nodes, b) {
                let nb = db.len();
                for gc in gy.chunks_exact(nb) {
                    db.iter_mut().zip(gc).for_each(|(d, &g)| *d += g);
                }
            }
        }
        &Op::MulTiled { a, b } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let nb = bv.len();
            if let Some(da) = slot(grads, nodes, a) {
                for (dc, gc) in da.chunks_exact_mut(nb).zip(gy.chunks_exact(nb)) {
                    for ((d, &g), &b) in dc.iter_mut().zip(gc).zip(bv) {
                        *d += g * b;
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                for (gc, ac) in gy.chunks_exact(nb).zip(av.chunks_exact(nb)) {
                    for ((d, &g), &a) in db.iter_mut().zip(gc).zip(ac) {
                        *d += g * a;
                    }
                }
            }
        }
        &Op::GroupAdd { x, s, rows } => {
            if let Some(dx) = slot(grads, nodes, x) {
                dx.iter_mut().zip(gy).for_each(|(d, &g)| *d += g);
            }
            if let Some(ds) = slot(grads, nodes, s) {
                let w = last(&nodes[s].shape);
                for (dsr, gg) in ds.chunks_exact_mut(w).zip(gy.chunks_exact(rows * w)) {
                    for gr in gg.chunks_exact(w) {
                        dsr.iter_mut().zip(gr).for_each(|(d, &g)| *d += g);
                    }
                }
            }
        }
        &Op::GroupMul { x, s, rows } => {
            let xv = &nodes[x].value;
            let sv = &nodes[s].value;
            let w = last(&nodes[s].shape);
            if let Some(dx) = slot(grads, nodes, x) {
                for ((dg, gg), sr) in dx.chunks_exact_mut(rows * w).zip(gy.chunks_exact(rows * w)).zip(sv.chunks_exact(w)) {
                    for (dr, gr) in dg.chunks_exact_mut(w).zip(gg.chunks_exact(w)) {
                        for ((d, &g), &c) in dr.iter_mut().zip(gr).zip(sr) {
                            *d += g * c;
                        }
                    }
                }
            }
            if let Some(ds) = slot(grads, nodes, s) {
                for ((dsr, gg), xg) in ds.chunks_exact_mut(w).zip(gy.chunks_exact(rows * w)).zip(xv.chunks_exact(rows * w)) {
                    for (gr, xr) in gg.chunks_exact(w).zip(xg.chunks_exact(w)) {
                        for ((d, &g), &x) in dsr.iter_mut().zip(gr).zip(xr) {
                            *d += g * x;
                        }
                    }
                }
            }
        }
        &Op::Scale { a, c } => {
            if let Some(da) = slot(grads, nodes, a) {
                da.iter_mut().zip(gy).for_each(|(d, &g)| *d += g * c);
            }
        }
        &Op::AddScalar { a } | &Op::Reshape { a } => {
            if let Some(da) = slot(grads, nodes, a) {
                da.iter_mut().zip(gy).for_each(|(d, &g)| *d += g);
            }
        }
        &Op::Gelu { a } => {
            let av = &nodes[a].value;
            if let Some(da) = slot(grads, nodes, a) {
                for ((d, &g), &x) in da.iter_mut().zip(gy).zip(av) {
                    *d += g * gelu_parts(x).1;
                }
            }
        }
        &Op::Silu { a } => {
            let av = &nodes[a].value;
            if let Some(da) = slot(grads, nodes, a) {
                for ((d, &g), &x) in da.iter_mut().zip(gy).zip(av) {
                    let sg = sigmoid(x);
                    *d += g * sg * (T::one() + x * (T::one() - sg));
                }
            }
        }
        &Op::Softmax { a } => {
            let y = &node.value;
            let w = last(&node.shape);
            if let Some(da) = slot(grads, nodes, a) {
                for r in 0..y.len() / w {
                    let yr = &y[r * w..(r + 1) * w];
                    let gr = &gy[r * w..(r + 1) * w];
                    let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for j in 0..w {
                        da[r * w + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        &Op::LogSoftmax { a } => {
            let y = &node.value;
            let w = last(&node.shape);
            if let Some(da) = slot(grads, nodes, a) {
                for r in 0..y.len() / w {
                    let yr = &y[r * w..(r + 1) * w];
                    let gr = &gy[r * w..(r + 1) * w];
                    let total: T = gr.iter().copied().sum();
                    for j in 0..w {
                        da[r * w + j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm { a, rstd } => {
            let xhat = &node.value;
            let w = last(&node.shape);
            let wf = T::c(w as f64);
            if let Some(da) = slot(grads, nodes, *a) {
                for (r, &rs) in rstd.iter().enumerate() {
                    let xr = &xhat[r * w..(r + 1) * w];
                    let gr = &gy[r * w..(r + 1) * w];
                    let mg: T = gr.iter().copied().sum::<T>() / wf;
                    let mgx: T = gr.iter().zip(xr).map(|(&g, &x)| g * x).sum::<T>() / wf;
                    for j in 0..w {
                        da[r * w + j] += rs * (gr[j] - mg - xr[j] * mgx);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = last(&node.shape);
            if let Some(dt) = slot(grads, nodes, *table) {
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gy[i * d + j];
                    }
                }
            }
        }
        Op::Gather { a, ids } => {
            let w = last(&nodes[*a].shape);
            if let Some(da) = slot(grads, nodes, *a) {
                for (r, &id) in ids.iter().enumerate() {
                    da[r * w + id] += gy[r];
                }
            }
        }
        &Op::SplitHeads { a, batch, seq, heads, dh } => {
            if let Some(da) = slot(grads, nodes, a) {
                for_each_head_index(batch, seq, heads, dh, |src, dst| da[src] += gy[dst]);
            }
        }
        &Op::MergeHeads { a, batch, seq, heads, dh } => {
            if let Some(da) = slot(grads, nodes, a) {
                for_each_head_index(batch, seq, heads, dh, |merged, split| da[split] += gy[merged]);
            }
        }
        &Op::SliceRows { a, start } => {
            let w = last(&node.shape);
            if let Some(da) = slot(grads, nodes, a) {
                for (j, &g) in gy.iter().enumerate() {
                    da[start * w + j] += g;
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(da) = slot(grads, nodes, a) {
                da.iter_mut().for_each(|d| *d += gy[0]);
            }
        }
        &Op::Mean { a } => {
            if let Some(da) = slot(grads, nodes, a) {
                let scale = gy[0] / T::c(da.len() as f64);
                da.iter_mut().for_each(|d| *d += scale);
            }
        }
    }
}

/// Visits `(merged_index, split_index)` pairs for the
/// `[batch*seq, heads*dh] <-> [batch*heads, seq, dh]` permutation.
fn for_each_head_index(batch: usize, seq: usize, heads: usize, dh: usize, mut f: impl FnMut(usize, usize)) {
    let width = heads * dh;
    for b in 0..batch {
        for m in 0..seq {
            for h in 0..heads {
                let merged = (b * seq + m) * width + h * dh;
                let split = ((b * heads + h) * seq + m) * dh;
                for d in 0..dh {
                    f(merged + d, split + d);
                }
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.g
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.g.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.nodes.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Vec<T> {
        self.g.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.g.nodes.borrow()[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let nodes = self.g.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> T {
        self.with_value(|v| v[0])
    }

    /// Copy of this value with no gradient linkage.
    pub fn detach(&self) -> Var<'g, T> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        self.g.push_leaf(shape, value, false)
    }

    fn unary(&self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'g, T> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        self.g.push(shape, value, op, &[self.id])
    }

    fn zip_same(&self, other: Var<'g, T>, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'g, T>> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(dim_err(name, &a.shape, &b.shape));
            }
            (
                a.shape.clone(),
                a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        Ok(self.g.push(shape, value, op, &[self.id, other.id]))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (m, k, n, value) = {
            let nodes = self.g.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(dim_err("matmul", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, T::one(), &a.value, k as isize, 1, &b.value, n as isize, 1, T::zero(), &mut c, n as isize, 1);
            (m, k, n, c)
        };
        Ok(self.g.push(vec![m, n], value, Op::MatMul { a: self.id, b: other.id, m, k, n }, &[self.id, other.id]))
    }

    /// Batched product `[b, m, k] x [b, k, n]`, or `[b, m, k] x [b, n, k]^T`
    /// when `trans_b` is set.
    pub fn bmm(&self, other: Var<'g, T>, trans_b: bool) -> Result<Var<'g, T>> {
        let (batch, m, k, n, value) = {
            let nodes = self.g.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let ok = a.shape.len() == 3 && b.shape.len() == 3 && a.shape[0] == b.shape[0];
            let inner = if trans_b { b.shape.get(2) } else { b.shape.get(1) };
            if !ok || inner != Some(&a.shape[2]) {
                return Err(dim_err("bmm", &a.shape, &b.shape));
            }
            let (batch, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
            let n = if trans_b { b.shape[1] } else { b.shape[2] };
            let mut c = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                let ai = &a.value[i * m * k..(i + 1) * m * k];
                let bi = &b.value[i * k * n..(i + 1) * k * n];
                let ci = &mut c[i * m * n..(i + 1) * m * n];
                if trans_b {
                    T::gemm(m, k, n, T::one(), ai, k as isize, 1, bi, 1, k as isize, T::zero(), ci, n as isize, 1);
                } else {
                    T::gemm(m, k, n, T::one(), ai, k as isize, 1, bi, n as isize, 1, T::zero(), ci, n as isize, 1);
                }
            }
            (batch, m, k, n, c)
        };
        Ok(self.g.push(
            vec![batch, m, n],
            value,
            Op::Bmm { a: self.id, b: other.id, batch, m, k, n, trans_b },
            &[self.id, other.id],
        ))
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip_same(other, "add", |x, y| x + y, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip_same(other, "sub", |x, y| x - y, Op::Sub { a: self.id, b: other.id })
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip_same(other, "mul", |x, y| x * y, Op::Mul { a: self.id, b: other.id })
    }

    fn tiled(&self, other: Var<'g, T>, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'g, T>> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let nb = b.value.len();
            // b tiles a whole number of times along a's rows
            if last(&a.shape) != last(&b.shape) || a.value.len() % nb != 0 {
                return Err(dim_err(name, &a.shape, &b.shape));
            }
            let mut out = a.value.clone();
            for ch in out.chunks_exact_mut(nb) {
                for (x, &y) in ch.iter_mut().zip(&b.value) {
                    *x = f(*x, y);
                }
            }
            (a.shape.clone(), out)
        };
        Ok(self.g.push(shape, value, op, &[self.id, other.id]))
    }

    /// Adds `other` (same trailing dimension, tiling `self` row-wise) to every block.
    pub fn add_tiled(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.tiled(other, "add_tiled", |x, y| x + y, Op::AddTiled { a: self.id, b: other.id })
    }

    pub fn mul_tiled(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.tiled(other, "mul_tiled", |x, y| x * y, Op::MulTiled { a: self.id, b: other.id })
    }

    fn grouped(&self, s: Var<'g, T>, rows: usize, name: &'static str, mul: bool) -> Result<Var<'g, T>> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let (x, sn) = (&nodes[self.id], &nodes[s.id]);
            let w = last(&x.shape);
            if sn.shape.len() != 2 || last(&sn.shape) != w || x.value.len() != sn.value.len() * rows {
                return Err(dim_err(name, &x.shape, &sn.shape));
            }
            let mut value = Vec::with_capacity(x.value.len());
            for (xg, sr) in x.value.chunks_exact(rows * w).zip(sn.value.chunks_exact(w)) {
                for xr in xg.chunks_exact(w) {
                    if mul {
                        value.extend(xr.iter().zip(sr).map(|(&v, &c)| v * c));
                    } else {
                        value.extend(xr.iter().zip(sr).map(|(&v, &c)| v + c));
                    }
                }
            }
            (x.shape.clone(), value)
        };
        let op = if mul {
            Op::GroupMul { x: self.id, s: s.id, rows }
        } else {
            Op::GroupAdd { x: self.id, s: s.id, rows }
        };
        Ok(self.g.push(shape, value, op, &[self.id, s.id]))
    }

    /// `self` is `[G*rows, W]`, `s` is `[G, W]`; adds row `g` of `s` to the
    /// `rows` consecutive rows of group `g`.
    pub fn group_add(&self, s: Var<'g, T>, rows: usize) -> Result<Var<'g, T>> {
        self.grouped(s, rows, "group_add", false)
    }

    pub fn group_mul(&self, s: Var<'g, T>, rows: usize) -> Result<Var<'g, T>> {
        self.grouped(s, rows, "group_mul", true)
    }

    pub fn scale(&self, c: T) -> Var<'g, T> {
        self.unary(|x| x * c, Op::Scale { a: self.id, c })
    }

    pub fn add_scalar(&self, c: T) -> Var<'g, T> {
        self.unary(|x| x + c, Op::AddScalar { a: self.id })
    }

    pub fn gelu(&self) -> Var<'g, T> {
        self.unary(|x| gelu_parts(x).0, Op::Gelu { a: self.id })
    }

    pub fn silu(&self) -> Var<'g, T> {
        self.unary(|x| x * sigmoid(x), Op::Silu { a: self.id })
    }

    fn rowwise(&self, name: &str, log: bool) -> Result<Var<'g, T>> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let n = &nodes[self.id];
            if let Some(bad) = n.value.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(name, format!("non-finite input at flat index {bad}")));
            }
            let w = last(&n.shape);
            let mut out = vec![T::zero(); n.value.len()];
            for (xr, yr) in n.value.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
                let mx = xr.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = 0.0f64;
                for (y, &x) in yr.iter_mut().zip(xr) {
                    *y = (x - mx).exp();
                    sum += y.f64();
                }
                if log {
                    let lse = T::c(sum.ln());
                    for (y, &x) in yr.iter_mut().zip(xr) {
                        *y = x - mx - lse;
                    }
                } else {
                    let inv = T::c(1.0 / sum);
                    yr.iter_mut().for_each(|y| *y *= inv);
                }
            }
            (n.shape.clone(), out)
        };
        let op = if log {
            Op::LogSoftmax { a: self.id }
        } else {
            Op::Softmax { a: self.id }
        };
        Ok(self.g.push(shape, value, op, &[self.id]))
    }

    /// Softmax over the trailing dimension (max-subtracted).
    pub fn softmax_last(&self) -> Result<Var<'g, T>> {
        self.rowwise("softmax_last", false)
    }

    pub fn log_softmax_last(&self) -> Result<Var<'g, T>> {
        self.rowwise("log_softmax_last", true)
    }

    /// Per-row standardization over the trailing dimension, no affine part.
    pub fn layer_norm(&self) -> Result<Var<'g, T>> {
        let (shape, value, rstd) = {
            let nodes = self.g.nodes.borrow();
            let n = &nodes[self.id];
            let w = last(&n.shape);
            if w < 2 {
                return Err(dim_err("layer_norm", &n.shape, &[2]));
            }
            let mut out = vec![T::zero(); n.value.len()];
            let mut rstd = Vec::with_capacity(n.value.len() / w);
            for (xr, yr) in n.value.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
                let mean = xr.iter().map(|v| v.f64()).sum::<f64>() / w as f64;
                let var = xr.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / w as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for (y, &x) in yr.iter_mut().zip(xr) {
                    *y = T::c((x.f64() - mean) * rs);
                }
                rstd.push(T::c(rs));
            }
            (n.shape.clone(), out, rstd)
        };
        Ok(self.g.push(shape, value, Op::LayerNorm { a: self.id, rstd }, &[self.id]))
    }

    /// `LayerNorm(h) * gain + bias` with `gain`, `bias` of shape `[W]`.
    pub fn layer_norm_affine(&self, gain: Var<'g, T>, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        self.layer_norm()?.mul_tiled(gain)?.add_tiled(bias)
    }

    /// Rows `ids[i]` of a `[V, D]` table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'g, T>> {
        let (d, value) = {
            let nodes = self.g.nodes.borrow();
            let t = &nodes[self.id];
            if t.shape.len() != 2 {
                return Err(dim_err("embedding_lookup", &t.shape, &[ids.len()]));
            }
            let (v, d) = (t.shape[0], t.shape[1]);
            if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= v) {
                return Err(Error::Index { position, id, limit: v });
            }
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                out.extend_from_slice(&t.value[id * d..(id + 1) * d]);
            }
            (d, out)
        };
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup with no ids"));
        }
        Ok(self.g.push(
            vec![ids.len(), d],
            value,
            Op::Embedding { table: self.id, ids: ids.to_vec() },
            &[self.id],
        ))
    }

    /// `out[r] = self[r, ids[r]]` for a `[R, C]` input.
    pub fn gather_last(&self, ids: &[usize]) -> Result<Var<'g, T>> {
        let value = {
            let nodes = self.g.nodes.borrow();
            let n = &nodes[self.id];
            let w = last(&n.shape);
            let rows = n.value.len() / w;
            if ids.len() != rows {
                return Err(dim_err("gather_last", &n.shape, &[ids.len()]));
            }
            if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= w) {
                return Err(Error::Index { position, id, limit: w });
            }
            ids.iter().enumerate().map(|(r, &id)| n.value[r * w + id]).collect()
        };
        Ok(self.g.push(vec![ids.len()], value, Op::Gather { a: self.id, ids: ids.to_vec() }, &[self.id]))
    }

    /// `[batch*seq, heads*dh] -> [batch*heads, seq, dh]`.
    pub fn split_heads(&self, batch: usize, seq: usize, heads: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != batch * seq || shape[1] % heads != 0 {
            return Err(dim_err("split_heads", &shape, &[batch, seq, heads]));
        }
        let dh = shape[1] / heads;
        let value = self.with_value(|x| {
            let mut out = vec![T::zero(); x.len()];
            for_each_head_index(batch, seq, heads, dh, |src, dst| out[dst] = x[src]);
            out
        });
        Ok(self.g.push(
            vec![batch * heads, seq, dh],
            value,
            Op::SplitHeads { a: self.id, batch, seq, heads, dh },
            &[self.id],
        ))
    }

    /// Inverse of [`Var::split_heads`].
    pub fn merge_heads(&self, batch: usize, heads: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() != 3 || shape[0] != batch * heads {
            return Err(dim_err("merge_heads", &shape, &[batch, heads]));
        }
        let (seq, dh) = (shape[1], shape[2]);
        let value = self.with_value(|x| {
            let mut out = vec![T::zero(); x.len()];
            for_each_head_index(batch, seq, heads, dh, |merged, split| out[merged] = x[split]);
            out
        });
        Ok(self.g.push(
            vec![batch * seq, heads * dh],
            value,
            Op::MergeHeads { a: self.id, batch, seq, heads, dh },
            &[self.id],
        ))
    }

    /// Rows `start..start+len` of a 2-D node.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() != 2 || start + len > shape[0] || len == 0 {
            return Err(dim_err("slice_rows", &shape, &[start, len]));
        }
        let w = shape[1];
        let value = self.with_value(|x| x[start * w..(start + len) * w].to_vec());
        Ok(self.g.push(vec![len, w], value, Op::SliceRows { a: self.id, start }, &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(dim_err("reshape", &self.shape(), shape));
        }
        let value = self.value();
        Ok(self.g.push(shape.to_vec(), value, Op::Reshape { a: self.id }, &[self.id]))
    }

    /// Sum of all entries, accumulated in f64.
    pub fn sum(&self) -> Var<'g, T> {
        let s = self.with_value(|v| v.iter().map(|x| x.f64()).sum::<f64>());
        self.g.push(vec![1], vec![T::c(s)], Op::Sum { a: self.id }, &[self.id])
    }

    pub fn mean(&self) -> Var<'g, T> {
        let s = self.with_value(|v| v.iter().map(|x| x.f64()).sum::<f64>() / v.len() as f64);
        self.g.push(vec![1], vec![T::c(s)], Op::Mean { a: self.id }, &[self.id])
    }

    pub fn square(&self) -> Result<Var<'g, T>> {
        self.mul(*self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let g = Graph::<f32>::new();
        let eye = g.constant(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b = g.constant(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(eye.matmul(b).unwrap().value(), b.value());
        let two = g.constant(&[1, 1], vec![2.]).unwrap();
        let three = g.constant(&[1, 1], vec![3.]).unwrap();
        assert_eq!(two.matmul(three).unwrap().value(), vec![6.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&[2, 3], &mut rng);
        let b = rand_tensor(&[3, 2], &mut rng);
        let g = Graph::new();
        let c = g.leaf(&a).matmul(g.leaf(&b)).unwrap().value();
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..3 {
                    s += a.data()[i * 3 + p] * b.data()[p * 2 + j];
                }
                assert!((c[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::<f32>::new();
        let a = g.constant(&[2, 3], vec![0.; 6]).unwrap();
        let err = a.matmul(a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_shift_and_reference() {
        let g = Graph::<f64>::new();
        let x = g.constant(&[4], vec![0.3; 4]).unwrap();
        for p in x.softmax_last().unwrap().value() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let x = g.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.softmax_last().unwrap().value();
        let shifted = x.add_scalar(17.5).softmax_last().unwrap().value();
        // high-precision reference: e^{-2}, e^{-1}, 1 over their sum
        let z = 1.0 + (-1.0f64).exp() + (-2.0f64).exp();
        let reference = [(-2.0f64).exp() / z, (-1.0f64).exp() / z, 1.0 / z];
        for i in 0..3 {
            assert!((y[i] - reference[i]).abs() < 1e-15);
            assert!((y[i] - shifted[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let g = Graph::<f32>::new();
        let x = g.constant(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(x.softmax_last(), Err(Error::Numeric { .. })));
        assert!(matches!(x.log_softmax_last(), Err(Error::Numeric { .. })));
    }

    #[test]
    fn log_softmax_reference() {
        let g = Graph::<f64>::new();
        let x = g.constant(&[2], vec![0.7, 0.7]).unwrap();
        for v in x.log_softmax_last().unwrap().value() {
            assert!((v - 0.5f64.ln()).abs() < 1e-15);
        }
        let xs = [0.1, -1.3, 2.2, 0.0, 0.55];
        let x = g.constant(&[5], xs.to_vec()).unwrap();
        let ls = x.log_softmax_last().unwrap().value();
        let sm = x.softmax_last().unwrap().value();
        let lse = xs.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        let total: f64 = ls.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for i in 0..5 {
            assert!((ls[i] - (xs[i] - lse)).abs() < 1e-12);
            assert!((ls[i].exp() - sm[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let g = Graph::<f64>::new();
        let x = g.constant(&[1, 4], vec![2.5; 4]).unwrap();
        assert!(x.layer_norm().unwrap().value().iter().all(|&v| v == 0.0));
        let x = g.constant(&[1, 2], vec![-1.0, 1.0]).unwrap();
        let y = x.layer_norm().unwrap().value();
        assert!((y[0] + 1.0).abs() < 1e-5 && (y[1] - 1.0).abs() < 1e-5);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.leaf(&rand_tensor(&[1, 9], &mut rng).reshape(&[1, 9]).unwrap());
        let y = x.layer_norm().unwrap().value();
        let mean: f64 = y.iter().sum::<f64>() / 9.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);

        let one = g.constant(&[1, 1], vec![1.0]).unwrap();
        assert!(matches!(one.layer_norm(), Err(Error::Dimension { .. })));
    }

    #[test]
    fn embedding_lookup_and_scatter() {
        let g = Graph::<f64>::new();
        let table = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap().with_grad();
        let t = g.leaf(&table);
        let out = t.embedding(&[0, 0]).unwrap();
        assert_eq!(out.value(), vec![1., 2., 1., 2.]);
        let out = t.embedding(&[2, 0, 2, 2]).unwrap();
        g.backward(out.sum()).unwrap();
        assert_eq!(g.grad(t).unwrap(), vec![1., 1., 0., 0., 3., 3.]);
        match t.embedding(&[1, 3]) {
            Err(Error::Index { position: 1, id: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn embedding_matches_copy_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = rand_tensor(&[6, 4], &mut rng);
        let ids: Vec<usize> = (0..10).map(|_| rng.gen_range(0..6)).collect();
        let g = Graph::new();
        let out = g.leaf(&table).embedding(&ids).unwrap().value();
        for (i, &id) in ids.iter().enumerate() {
            assert_eq!(&out[i * 4..(i + 1) * 4], table.row(id));
        }
    }

    #[test]
    fn backward_basics() {
        let g = Graph::<f64>::new();
        let xt = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap().with_grad();
        let yt = Tensor::new(vec![3], vec![4.0, 4.0, 4.0]).unwrap().with_grad();
        let x = g.leaf(&xt);
        let y = g.leaf(&yt);
        let root = x.square().unwrap().sum();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), vec![2.0, -4.0, 1.0]);
        assert!(g.grad(y).is_none());

        // accumulation across calls
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), vec![4.0, -8.0, 2.0]);

        let mut target = xt.clone();
        g.accumulate_into(x, &mut target).unwrap();
        assert_eq!(target.grad().unwrap(), &[4.0, -8.0, 2.0]);

        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    fn check(shapes: &[&[usize]], seed: u64, f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(s, &mut rng).with_grad()).collect();
        let err = grad_check(f, &mut params, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn gradients_of_each_op_match_finite_differences() {
        check(&[&[2, 3], &[3, 2], &[2, 4]], 11, |_, p| {
            Ok(p[0].matmul(p[1])?.matmul(p[2].slice_rows(0, 2)?)?.square()?.sum())
        });
        check(&[&[2, 3, 4], &[2, 5, 4], &[2, 5, 3]], 12, |_, p| {
            let s = p[0].bmm(p[1], true)?; // [2,3,5]
            let t = s.bmm(p[2], false)?; // [2,3,3]
            Ok(t.gelu().mean())
        });
        check(&[&[4, 3], &[3], &[4, 3]], 13, |_, p| {
            let x = p[0].add_tiled(p[1])?.mul_tiled(p[1])?;
            Ok(x.sub(p[2])?.mul(p[2])?.silu().sum())
        });
        check(&[&[6, 3], &[2, 3]], 14, |_, p| {
            let x = p[0].group_mul(p[1].add_scalar(1.0), 3)?.group_add(p[1], 3)?;
            Ok(x.scale(0.7).square()?.sum())
        });
        check(&[&[3, 5], &[3, 5]], 15, |_, p| {
            let logp = p[0].log_softmax_last()?;
            let q = p[1].softmax_last()?;
            Ok(logp.mul(q)?.sum())
        });
        check(&[&[3, 5], &[5], &[5], &[3, 5]], 16, |_, p| {
            Ok(p[0].layer_norm_affine(p[1], p[2])?.mul(p[3])?.sum())
        });
        check(&[&[5, 3]], 17, |_, p| {
            let e = p[0].embedding(&[4, 0, 4, 2])?;
            Ok(e.log_softmax_last()?.gather_last(&[0, 2, 1, 1])?.sum())
        });
        check(&[&[6, 4], &[6, 4]], 18, |_, p| {
            let h = p[0].split_heads(2, 3, 2)?; // [4,3,2]
            let s = h.bmm(h, true)?.softmax_last()?.bmm(h, false)?;
            Ok(s.merge_heads(2, 2)?.mul(p[1])?.reshape(&[24])?.sum())
        });
    }

    #[test]
    fn constant_graph_records_no_backward_info() {
        let g = Graph::<f32>::new();
        let a = g.constant(&[2, 2], vec![1.0; 4]).unwrap();
        let y = a.matmul(a).unwrap().softmax_last().unwrap();
        assert!(!y.requires_grad());
        g.backward(y.sum()).unwrap();
        assert!(g.grad(a).is_none());
    }

    #[test]
    fn deterministic_evaluation() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let a: Tensor<f32> = Tensor::from_fn(&[8, 8], |_| rng.gen_range(-1.0..1.0));
            let g = Graph::new();
            let x = g.leaf(&a);
            x.matmul(x).unwrap().layer_norm().unwrap().softmax_last().unwrap().value()
        };
        assert_eq!(run(), run());
    }
}
