//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node; [`Tensor`] is a cheap
//! handle into the graph. Calling [`Tensor::backward`] on a scalar walks the
//! tape in reverse creation order (a valid topological order, since parents
//! always precede children) and accumulates vector-Jacobian products.
//!
//! All reductions run sequentially in index order, so results are bitwise
//! reproducible across runs regardless of optimisation level or thread
//! count. The element type is generic: training uses `f32`, gradient
//! checking runs the same graph code in `f64`.

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::rc::Rc;

use num_traits::{Float, NumAssign};
use thiserror::Error;

/// Scalar element type of a graph.
pub trait Real: Float + NumAssign + std::iter::Sum + Debug + Display + 'static {}
impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for lossy scalar conversion from f64 literals.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from(x).expect("f64 -> Real conversion")
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("masked mse with an empty mask")]
    EmptyMask,
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
}

fn shape_err(op: &'static str, detail: String) -> GraphError {
    GraphError::ShapeMismatch { op, detail }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Matmul {
        a: usize,
        b: usize,
    },
    TransposeLast(usize),
    Permute102(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: T,
    },
    Gelu(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ScatterRows {
        visible: usize,
        fill: usize,
        visible_idx: Vec<usize>,
        masked_idx: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    Mean(usize),
    Sum(usize),
    MaskedMse {
        pred: usize,
        target: usize,
        masked_rows: Vec<usize>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
}

/// Handle to a computation graph. Clones share the same tape.
pub struct Graph<T> {
    inner: Rc<RefCell<Inner<T>>>,
}

impl<T> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph {
            inner: Rc::clone(&self.inner),
        }
    }
}

/// Handle to one value node in a [`Graph`].
pub struct Tensor<T> {
    graph: Graph<T>,
    id: usize,
    shape: Vec<usize>,
}

impl<T> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            graph: self.graph.clone(),
            id: self.id,
            shape: self.shape.clone(),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(Inner { nodes: Vec::new() })),
        }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool, op: Op<T>) -> Tensor<T> {
        debug_assert_eq!(values.len(), numel(&shape));
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.clone(),
            values,
            requires_grad,
            grad: None,
            op,
        });
        Tensor {
            graph: self.clone(),
            id,
            shape,
        }
    }

    /// Differentiable input node.
    pub fn leaf(&self, shape: &[usize], values: Vec<T>) -> Tensor<T> {
        assert_eq!(values.len(), numel(shape), "leaf value count");
        self.push(shape.to_vec(), values, true, Op::Leaf)
    }

    /// Non-differentiable input node.
    pub fn constant(&self, shape: &[usize], values: Vec<T>) -> Tensor<T> {
        assert_eq!(values.len(), numel(shape), "constant value count");
        self.push(shape.to_vec(), values, false, Op::Leaf)
    }

    pub fn scalar(&self, v: T) -> Tensor<T> {
        self.constant(&[1], vec![v])
    }

    fn values_of(&self, id: usize) -> Vec<T> {
        self.inner.borrow().nodes[id].values.clone()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }
}

impl<T: Real> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn values(&self) -> Vec<T> {
        self.graph.values_of(self.id)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let v = self.values();
        assert_eq!(v.len(), 1, "item() on non-scalar");
        v[0]
    }

    /// Gradient buffer populated by the last `backward` run, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    fn rg(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    fn same_graph(&self, other: &Tensor<T>) {
        assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "tensors from different graphs"
        );
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>, GraphError> {
        self.same_graph(other);
        if self.shape != other.shape {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let a = self.values();
        let b = other.values();
        let out = a.iter().zip(&b).map(|(&x, &y)| x + y).collect();
        Ok(self.graph.push(
            self.shape.clone(),
            out,
            self.rg() || other.rg(),
            Op::Add(self.id, other.id),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>, GraphError> {
        self.same_graph(other);
        if self.shape != other.shape {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let a = self.values();
        let b = other.values();
        let out = a.iter().zip(&b).map(|(&x, &y)| x * y).collect();
        Ok(self.graph.push(
            self.shape.clone(),
            out,
            self.rg() || other.rg(),
            Op::Mul(self.id, other.id),
        ))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let out = self.values().iter().map(|&x| x * c).collect();
        self.graph
            .push(self.shape.clone(), out, self.rg(), Op::Scale(self.id, c))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>, GraphError> {
        self.add(&other.scale(-T::one()))
    }

    pub fn gelu(&self) -> Tensor<T> {
        let out = self.values().iter().map(|&x| gelu_fwd(x)).collect();
        self.graph
            .push(self.shape.clone(), out, self.rg(), Op::Gelu(self.id))
    }

    // -- linear algebra ------------------------------------------------------

    /// Batched matrix product over the last two dims; leading dims must match.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>, GraphError> {
        self.same_graph(other);
        let (sa, sb) = (&self.shape, &other.shape);
        if sa.len() < 2
            || sb.len() < 2
            || sa.len() != sb.len()
            || sa[..sa.len() - 2] != sb[..sb.len() - 2]
        {
            return Err(shape_err("matmul", format!("{sa:?} vs {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", format!("inner dims {k} vs {kb}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let a = self.values();
        let b = other.values();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            matmul_acc(
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Ok(self.graph.push(
            shape,
            out,
            self.rg() || other.rg(),
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Swap the last two dims.
    pub fn transpose_last(&self) -> Result<Tensor<T>, GraphError> {
        let s = &self.shape;
        if s.len() < 2 {
            return Err(shape_err("transpose", format!("rank {} < 2", s.len())));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let a = self.values();
        let mut out = vec![T::zero(); a.len()];
        for bi in 0..batch {
            transpose_block(&a[bi * m * n..], m, n, &mut out[bi * m * n..]);
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.push(n);
        shape.push(m);
        Ok(self
            .graph
            .push(shape, out, self.rg(), Op::TransposeLast(self.id)))
    }

    /// Swap the first two axes of a rank-3 tensor.
    pub fn permute_102(&self) -> Result<Tensor<T>, GraphError> {
        let s = &self.shape;
        if s.len() != 3 {
            return Err(shape_err("permute_102", format!("rank {} != 3", s.len())));
        }
        let (a0, a1, a2) = (s[0], s[1], s[2]);
        let v = self.values();
        let mut out = vec![T::zero(); v.len()];
        for i in 0..a0 {
            for j in 0..a1 {
                let src = (i * a1 + j) * a2;
                let dst = (j * a0 + i) * a2;
                out[dst..dst + a2].copy_from_slice(&v[src..src + a2]);
            }
        }
        Ok(self
            .graph
            .push(vec![a1, a0, a2], out, self.rg(), Op::Permute102(self.id)))
    }

    /// Row-stable softmax over the last dim.
    pub fn softmax(&self) -> Result<Tensor<T>, GraphError> {
        let s = &self.shape;
        let n = *s
            .last()
            .ok_or_else(|| shape_err("softmax", "rank 0".into()))?;
        if n == 0 {
            return Err(shape_err("softmax", "empty last dim".into()));
        }
        let mut out = self.values();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        Ok(self
            .graph
            .push(s.clone(), out, self.rg(), Op::Softmax(self.id)))
    }

    /// Layer normalisation over the last dim with learned gain and bias.
    /// Variance uses 1/n.
    pub fn layer_norm(
        &self,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>, GraphError> {
        self.same_graph(gain);
        self.same_graph(bias);
        let n = *self
            .shape
            .last()
            .ok_or_else(|| shape_err("layer_norm", "rank 0".into()))?;
        if gain.shape != [n] || bias.shape != [n] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.shape, gain.shape, bias.shape
                ),
            ));
        }
        let g = gain.values();
        let b = bias.values();
        let mut out = self.values();
        for row in out.chunks_mut(n) {
            let (mean, var) = row_mean_var(row);
            let inv = (var + eps).sqrt().recip();
            for j in 0..n {
                row[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.graph.push(
            self.shape.clone(),
            out,
            self.rg() || gain.rg() || bias.rg(),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
        ))
    }

    /// `x · wᵀ (+ b)` with `w: (out, in)` applied over the last dim.
    pub fn linear(&self, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>, GraphError> {
        self.same_graph(w);
        if w.shape.len() != 2 {
            return Err(shape_err("linear", format!("weight rank {:?}", w.shape)));
        }
        let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
        let last = *self
            .shape
            .last()
            .ok_or_else(|| shape_err("linear", "rank 0 input".into()))?;
        if last != in_dim {
            return Err(shape_err(
                "linear",
                format!("input {:?} vs weight {:?}", self.shape, w.shape),
            ));
        }
        if let Some(bb) = b {
            self.same_graph(bb);
            if bb.shape != [out_dim] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} vs out {out_dim}", bb.shape),
                ));
            }
        }
        let rows = self.numel() / in_dim;
        let x = self.values();
        let wv = w.values();
        let mut out = vec![T::zero(); rows * out_dim];
        // out[r, o] = dot(x[r, :], w[o, :]) — both row-major contiguous.
        for r in 0..rows {
            let xr = &x[r * in_dim..(r + 1) * in_dim];
            let or = &mut out[r * out_dim..(r + 1) * out_dim];
            for (o, ov) in or.iter_mut().enumerate() {
                let wr = &wv[o * in_dim..(o + 1) * in_dim];
                let mut acc = T::zero();
                for (xv, wv) in xr.iter().zip(wr) {
                    acc += *xv * *wv;
                }
                *ov = acc;
            }
        }
        if let Some(bb) = b {
            let bv = bb.values();
            for r in 0..rows {
                for o in 0..out_dim {
                    out[r * out_dim + o] += bv[o];
                }
            }
        }
        let mut shape = self.shape[..self.shape.len() - 1].to_vec();
        shape.push(out_dim);
        let rg = self.rg() || w.rg() || b.is_some_and(|bb| bb.rg());
        Ok(self.graph.push(
            shape,
            out,
            rg,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|bb| bb.id),
            },
        ))
    }

    // -- indexing / shape ----------------------------------------------------

    /// Select rows of a 2D tensor by index, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<T>, GraphError> {
        if self.shape.len() != 2 {
            return Err(shape_err("gather_rows", format!("rank {:?}", self.shape)));
        }
        let (n, k) = (self.shape[0], self.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(GraphError::IndexOutOfRange { index: bad, len: n });
        }
        let v = self.values();
        let mut out = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            out.extend_from_slice(&v[i * k..(i + 1) * k]);
        }
        Ok(self.graph.push(
            vec![idx.len(), k],
            out,
            self.rg(),
            Op::GatherRows {
                x: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Build an `n_rows x k` tensor with `self`'s rows at `visible_idx` and
    /// `fill` (a k-vector) at every other row.
    pub fn scatter_rows(
        &self,
        fill: &Tensor<T>,
        visible_idx: &[usize],
        n_rows: usize,
    ) -> Result<Tensor<T>, GraphError> {
        self.same_graph(fill);
        if self.shape.len() != 2 {
            return Err(shape_err("scatter_rows", format!("rank {:?}", self.shape)));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        if visible_idx.len() != m {
            return Err(shape_err(
                "scatter_rows",
                format!("{} visible rows vs {} indices", m, visible_idx.len()),
            ));
        }
        if fill.shape != [k] {
            return Err(shape_err(
                "scatter_rows",
                format!("fill {:?} vs k {k}", fill.shape),
            ));
        }
        if let Some(&bad) = visible_idx.iter().find(|&&i| i >= n_rows) {
            return Err(GraphError::IndexOutOfRange {
                index: bad,
                len: n_rows,
            });
        }
        let mut taken = vec![false; n_rows];
        for &i in visible_idx {
            taken[i] = true;
        }
        let masked_idx: Vec<usize> = (0..n_rows).filter(|&i| !taken[i]).collect();
        let v = self.values();
        let f = fill.values();
        let mut out = vec![T::zero(); n_rows * k];
        for row in out.chunks_mut(k) {
            row.copy_from_slice(&f);
        }
        for (r, &i) in visible_idx.iter().enumerate() {
            out[i * k..(i + 1) * k].copy_from_slice(&v[r * k..(r + 1) * k]);
        }
        Ok(self.graph.push(
            vec![n_rows, k],
            out,
            self.rg() || fill.rg(),
            Op::ScatterRows {
                visible: self.id,
                fill: fill.id,
                visible_idx: visible_idx.to_vec(),
                masked_idx,
            },
        ))
    }

    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>, GraphError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no parts".into()))?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(shape_err("concat", format!("axis {axis} for rank {rank}")));
        }
        for p in parts {
            first.same_graph(p);
            if p.shape.len() != rank
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        let part_values: Vec<Vec<T>> = parts.iter().map(|p| p.values()).collect();
        for o in 0..outer {
            for (p, pv) in parts.iter().zip(&part_values) {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&pv[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        let rg = parts.iter().any(|p| p.rg());
        Ok(first.graph.push(
            shape,
            out,
            rg,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>, GraphError> {
        if numel(shape) != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(self.graph.push(
            shape.to_vec(),
            self.values(),
            self.rg(),
            Op::Reshape(self.id),
        ))
    }

    // -- reductions ----------------------------------------------------------

    pub fn mean(&self) -> Tensor<T> {
        let v = self.values();
        let n = real::<T>(v.len() as f64);
        let mut acc = T::zero();
        for &x in &v {
            acc += x;
        }
        self.graph
            .push(vec![1], vec![acc / n], self.rg(), Op::Mean(self.id))
    }

    pub fn sum(&self) -> Tensor<T> {
        let v = self.values();
        let mut acc = T::zero();
        for &x in &v {
            acc += x;
        }
        self.graph
            .push(vec![1], vec![acc], self.rg(), Op::Sum(self.id))
    }

    /// Mean squared error over the voxels of the given rows only.
    pub fn masked_mse(
        &self,
        target: &Tensor<T>,
        masked_rows: &[usize],
    ) -> Result<Tensor<T>, GraphError> {
        self.same_graph(target);
        if self.shape.len() != 2 || self.shape != target.shape {
            return Err(shape_err(
                "masked_mse",
                format!("{:?} vs {:?}", self.shape, target.shape),
            ));
        }
        if masked_rows.is_empty() {
            return Err(GraphError::EmptyMask);
        }
        let (n, k) = (self.shape[0], self.shape[1]);
        if let Some(&bad) = masked_rows.iter().find(|&&r| r >= n) {
            return Err(GraphError::IndexOutOfRange { index: bad, len: n });
        }
        let p = self.values();
        let t = target.values();
        let mut acc = T::zero();
        for &r in masked_rows {
            for j in 0..k {
                let d = p[r * k + j] - t[r * k + j];
                acc += d * d;
            }
        }
        let count = real::<T>((masked_rows.len() * k) as f64);
        Ok(self.graph.push(
            vec![1],
            vec![acc / count],
            self.rg() || target.rg(),
            Op::MaskedMse {
                pred: self.id,
                target: target.id,
                masked_rows: masked_rows.to_vec(),
            },
        ))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse-mode sweep from a scalar. Populates `grad` on every
    /// requires-grad node reachable from this one.
    pub fn backward(&self) -> Result<(), GraphError> {
        if self.numel() != 1 {
            return Err(GraphError::NotScalar {
                numel: self.numel(),
            });
        }
        let mut inner = self.graph.inner.borrow_mut();
        let n_nodes = inner.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n_nodes];
        grads[self.id] = Some(vec![T::one()]);

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !inner.nodes[id].requires_grad {
                continue;
            }
            backprop_node(&mut inner, id, &g, &mut grads);
            inner.nodes[id].grad = Some(g);
        }
        Ok(())
    }
}

/// Accumulate `g` into the grad slot for `id`, allocating on first touch.
fn accum<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = grads[id].get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

fn backprop_node<T: Real>(inner: &mut Inner<T>, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    // Clone the op descriptor to release the borrow on the node itself.
    let op = inner.nodes[id].op.clone();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &p in &[a, b] {
                if inner.nodes[p].requires_grad {
                    accum(grads, p, g.len(), |buf| {
                        for (bv, gv) in buf.iter_mut().zip(g) {
                            *bv += *gv;
                        }
                    });
                }
            }
        }
        Op::Mul(a, b) => {
            if inner.nodes[a].requires_grad {
                let bv = inner.nodes[b].values.clone();
                accum(grads, a, g.len(), |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
            }
            if inner.nodes[b].requires_grad {
                let av = inner.nodes[a].values.clone();
                accum(grads, b, g.len(), |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
        }
        Op::Scale(a, c) => {
            if inner.nodes[a].requires_grad {
                accum(grads, a, g.len(), |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * c;
                    }
                });
            }
        }
        Op::Matmul { a, b } => {
            let sa = inner.nodes[a].shape.clone();
            let sb = inner.nodes[b].shape.clone();
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = sb[sb.len() - 1];
            let batch: usize = sa[..sa.len() - 2].iter().product();
            if inner.nodes[a].requires_grad {
                let bv = inner.nodes[b].values.clone();
                let alen = inner.nodes[a].values.len();
                accum(grads, a, alen, |buf| {
                    for bi in 0..batch {
                        // dA[i,l] += sum_j dC[i,j] * B[l,j]
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        let da = &mut buf[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            let grow = &gc[i * n..(i + 1) * n];
                            for l in 0..k {
                                let brow = &bb[l * n..(l + 1) * n];
                                let mut acc = T::zero();
                                for (gv, bvv) in grow.iter().zip(brow) {
                                    acc += *gv * *bvv;
                                }
                                da[i * k + l] += acc;
                            }
                        }
                    }
                });
            }
            if inner.nodes[b].requires_grad {
                let av = inner.nodes[a].values.clone();
                let blen = inner.nodes[b].values.len();
                accum(grads, b, blen, |buf| {
                    for bi in 0..batch {
                        // dB[l,j] += sum_i A[i,l] * dC[i,j]
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let aa = &av[bi * m * k..(bi + 1) * m * k];
                        let db = &mut buf[bi * k * n..(bi + 1) * k * n];
                        for i in 0..m {
                            let grow = &gc[i * n..(i + 1) * n];
                            for l in 0..k {
                                let a_il = aa[i * k + l];
                                let drow = &mut db[l * n..(l + 1) * n];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += a_il * *gv;
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::TransposeLast(a) => {
            if inner.nodes[a].requires_grad {
                let s = inner.nodes[id].shape.clone();
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                let batch: usize = s[..s.len() - 2].iter().product();
                accum(grads, a, g.len(), |buf| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..];
                        let ob = &mut buf[bi * m * n..];
                        for i in 0..m {
                            for j in 0..n {
                                ob[j * m + i] += gb[i * n + j];
                            }
                        }
                    }
                });
            }
        }
        Op::Permute102(a) => {
            if inner.nodes[a].requires_grad {
                // Output shape is (a1, a0, a2); inverse is the same swap.
                let s = inner.nodes[id].shape.clone();
                let (o0, o1, o2) = (s[0], s[1], s[2]);
                accum(grads, a, g.len(), |buf| {
                    for i in 0..o0 {
                        for j in 0..o1 {
                            let src = (i * o1 + j) * o2;
                            let dst = (j * o0 + i) * o2;
                            for t in 0..o2 {
                                buf[dst + t] += g[src + t];
                            }
                        }
                    }
                });
            }
        }
        Op::Softmax(a) => {
            if inner.nodes[a].requires_grad {
                let s = inner.nodes[id].values.clone();
                let n = *inner.nodes[id].shape.last().unwrap();
                accum(grads, a, g.len(), |buf| {
                    for (row, (srow, grow)) in s.chunks(n).zip(g.chunks(n)).enumerate() {
                        let mut dot = T::zero();
                        for (sv, gv) in srow.iter().zip(grow) {
                            dot += *sv * *gv;
                        }
                        let out = &mut buf[row * n..(row + 1) * n];
                        for j in 0..n {
                            out[j] += srow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xv = inner.nodes[x].values.clone();
            let gv = inner.nodes[gain].values.clone();
            let n = gv.len();
            let rows = xv.len() / n;
            if inner.nodes[bias].requires_grad {
                accum(grads, bias, n, |buf| {
                    for r in 0..rows {
                        for j in 0..n {
                            buf[j] += g[r * n + j];
                        }
                    }
                });
            }
            if inner.nodes[gain].requires_grad {
                accum(grads, gain, n, |buf| {
                    for r in 0..rows {
                        let xr = &xv[r * n..(r + 1) * n];
                        let (mean, var) = row_mean_var(xr);
                        let inv = (var + eps).sqrt().recip();
                        for j in 0..n {
                            buf[j] += g[r * n + j] * (xr[j] - mean) * inv;
                        }
                    }
                });
            }
            if inner.nodes[x].requires_grad {
                accum(grads, x, xv.len(), |buf| {
                    let inv_n = real::<T>(1.0 / n as f64);
                    for r in 0..rows {
                        let xr = &xv[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let (mean, var) = row_mean_var(xr);
                        let inv = (var + eps).sqrt().recip();
                        let mut sum_gh = T::zero();
                        let mut sum_gh_xhat = T::zero();
                        for j in 0..n {
                            let gh = gr[j] * gv[j];
                            let xhat = (xr[j] - mean) * inv;
                            sum_gh += gh;
                            sum_gh_xhat += gh * xhat;
                        }
                        let mean_gh = sum_gh * inv_n;
                        let mean_gh_xhat = sum_gh_xhat * inv_n;
                        let out = &mut buf[r * n..(r + 1) * n];
                        for j in 0..n {
                            let gh = gr[j] * gv[j];
                            let xhat = (xr[j] - mean) * inv;
                            out[j] += inv * (gh - mean_gh - xhat * mean_gh_xhat);
                        }
                    }
                });
            }
        }
        Op::Gelu(a) => {
            if inner.nodes[a].requires_grad {
                let xv = inner.nodes[a].values.clone();
                accum(grads, a, g.len(), |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * gelu_bwd(xv[i]);
                    }
                });
            }
        }
        Op::Linear { x, w, b } => {
            let xv = inner.nodes[x].values.clone();
            let wv = inner.nodes[w].values.clone();
            let (out_dim, in_dim) = {
                let s = &inner.nodes[w].shape;
                (s[0], s[1])
            };
            let rows = xv.len() / in_dim;
            if let Some(bid) = b {
                if inner.nodes[bid].requires_grad {
                    accum(grads, bid, out_dim, |buf| {
                        for r in 0..rows {
                            for o in 0..out_dim {
                                buf[o] += g[r * out_dim + o];
                            }
                        }
                    });
                }
            }
            if inner.nodes[w].requires_grad {
                accum(grads, w, wv.len(), |buf| {
                    // dW[o, i] += sum_r dY[r, o] * X[r, i]
                    for r in 0..rows {
                        let xr = &xv[r * in_dim..(r + 1) * in_dim];
                        let gr = &g[r * out_dim..(r + 1) * out_dim];
                        for (o, &gvo) in gr.iter().enumerate() {
                            let wrow = &mut buf[o * in_dim..(o + 1) * in_dim];
                            for (wv, xvv) in wrow.iter_mut().zip(xr) {
                                *wv += gvo * *xvv;
                            }
                        }
                    }
                });
            }
            if inner.nodes[x].requires_grad {
                accum(grads, x, xv.len(), |buf| {
                    // dX[r, i] += sum_o dY[r, o] * W[o, i]
                    for r in 0..rows {
                        let gr = &g[r * out_dim..(r + 1) * out_dim];
                        let xr = &mut buf[r * in_dim..(r + 1) * in_dim];
                        for (o, &gvo) in gr.iter().enumerate() {
                            let wrow = &wv[o * in_dim..(o + 1) * in_dim];
                            for (xg, wvv) in xr.iter_mut().zip(wrow) {
                                *xg += gvo * *wvv;
                            }
                        }
                    }
                });
            }
        }
        Op::GatherRows { x, idx } => {
            if inner.nodes[x].requires_grad {
                let xlen = inner.nodes[x].values.len();
                let k = inner.nodes[id].shape[1];
                accum(grads, x, xlen, |buf| {
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g[r * k..(r + 1) * k];
                        let dst = &mut buf[i * k..(i + 1) * k];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                });
            }
        }
        Op::ScatterRows {
            visible,
            fill,
            visible_idx,
            masked_idx,
        } => {
            let k = inner.nodes[id].shape[1];
            if inner.nodes[visible].requires_grad {
                let vlen = inner.nodes[visible].values.len();
                accum(grads, visible, vlen, |buf| {
                    for (r, &i) in visible_idx.iter().enumerate() {
                        let src = &g[i * k..(i + 1) * k];
                        let dst = &mut buf[r * k..(r + 1) * k];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                });
            }
            if inner.nodes[fill].requires_grad {
                accum(grads, fill, k, |buf| {
                    for &i in &masked_idx {
                        let src = &g[i * k..(i + 1) * k];
                        for (d, s) in buf.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                });
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = inner.nodes[id].shape.clone();
            let outer: usize = out_shape[..axis].iter().product();
            let inner_len: usize = out_shape[axis + 1..].iter().product();
            let total_chunk = out_shape[axis] * inner_len;
            let mut offset = 0;
            for &p in &parts {
                let p_axis = inner.nodes[p].shape[axis];
                let chunk = p_axis * inner_len;
                if inner.nodes[p].requires_grad {
                    let plen = inner.nodes[p].values.len();
                    let off = offset;
                    accum(grads, p, plen, |buf| {
                        for o in 0..outer {
                            let src = &g[o * total_chunk + off..o * total_chunk + off + chunk];
                            let dst = &mut buf[o * chunk..(o + 1) * chunk];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                    });
                }
                offset += chunk;
            }
        }
        Op::Reshape(a) => {
            if inner.nodes[a].requires_grad {
                accum(grads, a, g.len(), |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += *s;
                    }
                });
            }
        }
        Op::Mean(a) => {
            if inner.nodes[a].requires_grad {
                let alen = inner.nodes[a].values.len();
                let c = g[0] / real::<T>(alen as f64);
                accum(grads, a, alen, |buf| {
                    for d in buf.iter_mut() {
                        *d += c;
                    }
                });
            }
        }
        Op::Sum(a) => {
            if inner.nodes[a].requires_grad {
                let alen = inner.nodes[a].values.len();
                let c = g[0];
                accum(grads, a, alen, |buf| {
                    for d in buf.iter_mut() {
                        *d += c;
                    }
                });
            }
        }
        Op::MaskedMse {
            pred,
            target,
            masked_rows,
        } => {
            let pv = inner.nodes[pred].values.clone();
            let tv = inner.nodes[target].values.clone();
            let k = inner.nodes[pred].shape[1];
            let count = real::<T>((masked_rows.len() * k) as f64);
            let c = g[0] * real::<T>(2.0) / count;
            if inner.nodes[pred].requires_grad {
                accum(grads, pred, pv.len(), |buf| {
                    for &r in &masked_rows {
                        for j in 0..k {
                            buf[r * k + j] += c * (pv[r * k + j] - tv[r * k + j]);
                        }
                    }
                });
            }
            if inner.nodes[target].requires_grad {
                accum(grads, target, tv.len(), |buf| {
                    for &r in &masked_rows {
                        for j in 0..k {
                            buf[r * k + j] -= c * (pv[r * k + j] - tv[r * k + j]);
                        }
                    }
                });
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// `out += a · b` for row-major blocks; ikj loop order for cache locality.
fn matmul_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (ov, bv) in orow.iter_mut().zip(brow) {
                *ov += a_il * *bv;
            }
        }
    }
}

fn transpose_block<T: Real>(a: &[T], m: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let mut max = row[0];
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = sum.recip();
    for x in row.iter_mut() {
        *x *= inv;
    }
}

fn row_mean_var<T: Real>(row: &[T]) -> (T, T) {
    let n = real::<T>(row.len() as f64);
    let mut mean = T::zero();
    for &x in row {
        mean += x;
    }
    mean /= n;
    let mut var = T::zero();
    for &x in row {
        let d = x - mean;
        var += d * d;
    }
    (mean, var / n)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let k = real::<T>(GELU_K);
    let c = real::<T>(GELU_C);
    let half = real::<T>(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Real>(x: T) -> T {
    let k = real::<T>(GELU_K);
    let c = real::<T>(GELU_C);
    let half = real::<T>(0.5);
    let three = real::<T>(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + three * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Compare analytic gradients against central finite differences.
///
/// `f` rebuilds the loss from scratch for given leaf values; it is called
/// once for the analytic pass and twice per sampled coordinate. Returns the
/// maximum relative error `|a - n| / max(|a|, |n|, 1e-8)` over the sample.
/// At most `coords_per_param` coordinates are probed per parameter, spread
/// evenly over each buffer.
pub fn grad_check<F>(
    f: F,
    params: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
    coords_per_param: usize,
) -> Result<f64, GraphError>
where
    F: Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>, GraphError>,
{
    #[allow(clippy::type_complexity)]
    let eval = |values: &[Vec<f64>]| -> Result<(f64, Option<Vec<Vec<f64>>>), GraphError> {
        let g = Graph::<f64>::new();
        let leaves: Vec<Tensor<f64>> = params
            .iter()
            .zip(values)
            .map(|((shape, _), v)| g.leaf(shape, v.clone()))
            .collect();
        let loss = f(&g, &leaves)?;
        if loss.numel() != 1 {
            return Err(GraphError::NotScalar {
                numel: loss.numel(),
            });
        }
        let value = loss.item();
        if !value.is_finite() {
            return Err(GraphError::NonFinite("grad_check loss"));
        }
        loss.backward()?;
        let grads = leaves
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
            .collect();
        Ok((value, Some(grads)))
    };

    let base: Vec<Vec<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    let (_, analytic) = eval(&base)?;
    let analytic = analytic.unwrap();

    let mut max_rel = 0.0f64;
    for (pi, (_, v)) in params.iter().enumerate() {
        let len = v.len();
        let samples = len.min(coords_per_param.max(1));
        for s in 0..samples {
            let ci = s * len / samples;
            let mut plus = base.clone();
            plus[pi][ci] += eps;
            let mut minus = base.clone();
            minus[pi][ci] -= eps;
            let g_plus = {
                let gph = Graph::<f64>::new();
                let leaves: Vec<Tensor<f64>> = params
                    .iter()
                    .zip(&plus)
                    .map(|((shape, _), v)| gph.constant(shape, v.clone()))
                    .collect();
                f(&gph, &leaves)?.item()
            };
            let g_minus = {
                let gph = Graph::<f64>::new();
                let leaves: Vec<Tensor<f64>> = params
                    .iter()
                    .zip(&minus)
                    .map(|((shape, _), v)| gph.constant(shape, v.clone()))
                    .collect();
                f(&gph, &leaves)?.item()
            };
            if !g_plus.is_finite() || !g_minus.is_finite() {
                return Err(GraphError::NonFinite("grad_check finite difference"));
            }
            let numeric = (g_plus - g_minus) / (2.0 * eps);
            let a = analytic[pi][ci];
            if !a.is_finite() {
                return Err(GraphError::NonFinite("grad_check analytic gradient"));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
