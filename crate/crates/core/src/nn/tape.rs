//! Reverse-mode differentiation over a recorded list of matrix primitives.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{log_sum_exp, softmax_in_place, Tensor2};
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::sparse::SparseMatrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    BroadcastRows(Var),
    SparseLeft(Arc<SparseMatrix>, Var),
    GatherRows(Var, Arc<[Option<usize>]>),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        active: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

/// Ordered record of executed primitives with the activations needed for
/// the backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Constant)
    }

    /// Records a parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a 1×c row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(row));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor2::from_vec(av.rows(), av.cols(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Repeats a 1×c row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let rv = self.value(row);
        if rv.rows() != 1 {
            return Err(Error::shape("broadcast_rows", format!("{:?} is not a row", rv.shape())));
        }
        let mut data = Vec::with_capacity(n * rv.cols());
        for _ in 0..n {
            data.extend_from_slice(rv.data());
        }
        let out = Tensor2::from_vec(n, rv.cols(), data)?;
        Ok(self.push(out, Op::BroadcastRows(row)))
    }

    /// `S·h` for a constant sparse `S`.
    pub fn sparse_matmul(&mut self, s: &Arc<SparseMatrix>, h: Var) -> Result<Var> {
        let hv = self.value(h);
        if hv.rows() != s.cols() {
            return Err(Error::shape(
                "sparse_matmul",
                format!("{}x{} · {:?}", s.rows(), s.cols(), hv.shape()),
            ));
        }
        let data = s.matmul_dense(hv.data(), hv.cols());
        let out = Tensor2::from_vec(s.rows(), hv.cols(), data)?;
        Ok(self.push(out, Op::SparseLeft(s.clone(), h)))
    }

    /// Message passing `Â·h`; the backward pass multiplies by `Âᵀ`.
    pub fn sparse_propagate(&mut self, adj: &NormalizedAdjacency, h: Var) -> Result<Var> {
        self.sparse_matmul(adj.matrix(), h)
    }

    /// Row `i` of the output is `table[ids[i]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, table: Var, ids: Arc<[Option<usize>]>) -> Result<Var> {
        let tv = self.value(table);
        let mut out = Tensor2::zeros(ids.len(), tv.cols());
        for (i, id) in ids.iter().enumerate() {
            if let Some(k) = *id {
                if k >= tv.rows() {
                    return Err(Error::shape("gather_rows", format!("row {k} of {}", tv.rows())));
                }
                out.row_mut(i).copy_from_slice(tv.row(k));
            }
        }
        Ok(self.push(out, Op::GatherRows(table, ids)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor2::from_vec(xv.rows(), xv.cols(), data).unwrap();
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor2::from_vec(xv.rows(), xv.cols(), data).unwrap();
        self.push(out, Op::Sigmoid(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor2::row_vector(vec![s]), Op::Sum(x))
    }

    /// `Σ_{i∈active} weights[i] · CE(targets[i], softmax(logits_i))` as a 1×1 value.
    /// Rows outside `active` receive no gradient.
    pub fn weighted_softmax_ce(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        active: &[usize],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = lv.shape();
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "weighted_softmax_ce",
                format!("{} targets / {} weights for {n} rows", targets.len(), weights.len()),
            ));
        }
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(active.len() * c);
        for &i in active {
            if i >= n {
                return Err(Error::InvalidArgument(format!("active row {i} out of range")));
            }
            let target = targets[i];
            if target >= c {
                return Err(Error::InvalidArgument(format!(
                    "target {target} out of range for {c} classes"
                )));
            }
            if weights[i] < 0.0 {
                return Err(Error::InvalidArgument(format!("negative weight at row {i}")));
            }
            let row = lv.row(i);
            loss += weights[i] * (log_sum_exp(row) - row[target]);
            let start = probs.len();
            probs.extend_from_slice(row);
            softmax_in_place(&mut probs[start..]);
        }
        Ok(self.push(
            Tensor2::row_vector(vec![loss]),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                active: active.to_vec(),
                probs,
            },
        ))
    }

    /// Backpropagates from a 1×1 `output`. Parameters never touched by the
    /// forward pass get zero gradients.
    pub fn backward(&self, output: Var, store: &ParamStore) -> Result<Gradients> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::shape("backward", "output must be 1x1"));
        }
        let mut adj: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Tensor2::row_vector(vec![1.0]));
        let mut grads = store.zero_grads();

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.grads[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRow(x, row) => {
                    let mut gr = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, *row, gr);
                    accumulate(&mut adj, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, self.value(*b), |x, y| x * y);
                    let gb = elementwise(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::BroadcastRows(row) => {
                    let mut gr = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, *row, gr);
                }
                Op::SparseLeft(s, h) => {
                    let data = s.transpose_matmul_dense(g.data(), g.cols());
                    accumulate(&mut adj, *h, Tensor2::from_vec(s.cols(), g.cols(), data)?);
                }
                Op::GatherRows(table, ids) => {
                    let tv = self.value(*table);
                    let mut gt = Tensor2::zeros(tv.rows(), tv.cols());
                    for (i, id) in ids.iter().enumerate() {
                        if let Some(k) = *id {
                            for (o, v) in gt.row_mut(k).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                    }
                    accumulate(&mut adj, *table, gt);
                }
                Op::Relu(x) => {
                    let gx = elementwise(&g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut adj, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = elementwise(&g, &node.value, |gv, s| gv * s * (1.0 - s));
                    accumulate(&mut adj, *x, gx);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let up = g.data()[0];
                    accumulate(&mut adj, *x, Tensor2::from_fn(xv.rows(), xv.cols(), |_, _| up));
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    weights,
                    active,
                    probs,
                } => {
                    let up = g.data()[0];
                    let lv = self.value(*logits);
                    let c = lv.cols();
                    let mut gl = Tensor2::zeros(lv.rows(), c);
                    for (k, &i) in active.iter().enumerate() {
                        let w = weights[i] * up;
                        let row = gl.row_mut(i);
                        for (j, o) in row.iter_mut().enumerate() {
                            *o += w * probs[k * c + j];
                        }
                        row[targets[i]] -= w;
                    }
                    accumulate(&mut adj, *logits, gl);
                }
            }
        }
        Ok(grads)
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn elementwise(a: &Tensor2, b: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor2::from_vec(a.rows(), a.cols(), data).unwrap()
}

fn accumulate(adj: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
