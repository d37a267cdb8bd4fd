//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in append order;
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every registered parameter into a [`GradientMap`]. Graphs are
//! re-recorded per forward pass and never reused.
//!
//! Supported broadcasts are deliberately narrow: scalar-with-tensor and
//! row-vector-with-matrix. Anything else is a shape error.

use std::collections::BTreeMap;

use crate::scalar::{lit, Scalar};
use crate::tensor::{Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphRef(usize);

/// Identity of a trainable parameter, assigned by its owning store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf { param: Option<ParamId> },
    Matmul(GraphRef, GraphRef),
    Transpose(GraphRef),
    Add(GraphRef, GraphRef),
    Sub(GraphRef, GraphRef),
    Hadamard(GraphRef, GraphRef),
    Scale(GraphRef, S),
    AddScalar(GraphRef, S),
    Sigmoid(GraphRef),
    Tanh(GraphRef),
    Abs(GraphRef),
    Sqrt(GraphRef),
    RowSoftmax(GraphRef),
    Sum(GraphRef),
    Mean(GraphRef),
    SumRows(GraphRef),
    Concat(GraphRef, GraphRef),
    SliceCols { input: GraphRef, start: usize, len: usize },
    GatherRows { table: GraphRef, rows: Vec<usize> },
    Reshape(GraphRef),
    RowBatchMatmul(GraphRef, GraphRef),
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
}

/// Recorded forward pass: one node per operation, inputs precede outputs.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Accumulated gradients keyed by parameter identity.
///
/// After [`Graph::backward`] every registered parameter appears exactly
/// once; parameters with no path to the loss carry zeros.
#[derive(Clone, Debug)]
pub struct GradientMap<S> {
    grads: BTreeMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> GradientMap<S> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Global L2 norm over every gradient entry.
    pub fn global_norm(&self) -> S {
        let total: S = self
            .grads
            .values()
            .map(|g| g.data().iter().map(|&v| v * v).sum::<S>())
            .sum();
        total.sqrt()
    }

    /// Scale every gradient in place (used by norm clipping).
    pub fn scale(&mut self, factor: S) {
        for g in self.grads.values_mut() {
            *g = g.map(|v| v * factor);
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, r: GraphRef) -> &Tensor<S> {
        &self.nodes[r.0].value
    }

    /// Insert a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> GraphRef {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Insert a trainable leaf tied to a parameter identity.
    pub fn param(&mut self, id: ParamId, value: Tensor<S>) -> GraphRef {
        self.push(Op::Leaf { param: Some(id) }, value.requiring_grad())
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> GraphRef {
        self.nodes.push(Node { op, value });
        GraphRef(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op<S>, value: Tensor<S>, name: &'static str) -> Result<GraphRef, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(op, value))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// `a[m×k] · b[k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: GraphRef, b: GraphRef) -> Result<GraphRef, TensorError> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.record(Op::Matmul(a, b), Tensor::from_parts(vec![m, n], out), "matmul")
    }

    /// `a[m×n] -> [n×m]`.
    pub fn transpose(&mut self, a: GraphRef) -> Result<GraphRef, TensorError> {
        let (m, n) = self.value(a).dims2("transpose")?;
        let out = transpose_raw(self.value(a).data(), m, n);
        self.record(Op::Transpose(a), Tensor::from_parts(vec![n, m], out), "transpose")
    }

    /// Row-batched matmul: `a[n×k] ⊗ b[n×k×c] -> [n×c]`, row `i` of the
    /// output being `a_i · b_i`.
    pub fn row_batch_matmul(&mut self, a: GraphRef, b: GraphRef) -> Result<GraphRef, TensorError> {
        let (n, k) = self.value(a).dims2("row_batch_matmul")?;
        let bshape = self.value(b).shape().to_vec();
        let (n2, k2, c) = match bshape.as_slice() {
            [n2, k2, c] => (*n2, *k2, *c),
            _ => {
                return Err(TensorError::ShapeContract {
                    op: "row_batch_matmul",
                    shape: bshape,
                    wanted: "rank 3",
                })
            }
        };
        if n != n2 || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "row_batch_matmul",
                left: vec![n, k],
                right: bshape,
            });
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![S::zero(); n * c];
        for i in 0..n {
            for kk in 0..k {
                let aik = ad[i * k + kk];
                let brow = &bd[i * k * c + kk * c..i * k * c + kk * c + c];
                let orow = &mut out[i * c..i * c + c];
                for j in 0..c {
                    orow[j] += aik * brow[j];
                }
            }
        }
        self.record(
            Op::RowBatchMatmul(a, b),
            Tensor::from_parts(vec![n, c], out),
            "row_batch_matmul",
        )
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: GraphRef, b: GraphRef) -> Result<GraphRef, TensorError> {
        let out = broadcast_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.record(Op::Add(a, b), out, "add")
    }

    pub fn sub(&mut self, a: GraphRef, b: GraphRef) -> Result<GraphRef, TensorError> {
        let out = broadcast_zip(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.record(Op::Sub(a, b), out, "sub")
    }

    /// Elementwise product, with scalar and row-vector broadcast.
    pub fn hadamard(&mut self, a: GraphRef, b: GraphRef) -> Result<GraphRef, TensorError> {
        let out = broadcast_zip(self.value(a), self.value(b), "hadamard", |x, y| x * y)?;
        self.record(Op::Hadamard(a, b), out, "hadamard")
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: GraphRef, factor: S) -> Result<GraphRef, TensorError> {
        let out = self.value(a).map(|v| v * factor);
        self.record(Op::Scale(a, factor), out, "scale")
    }

    /// Add a constant to every element.
    pub fn add_scalar(&mut self, a: GraphRef, c: S) -> Result<GraphRef, TensorError> {
        let out = self.value(a).map(|v| v + c);
        self.record(Op::AddScalar(a, c), out, "add_scalar")
    }

    pub fn sigmoid(&mut self, a: GraphRef) -> Result<GraphRef, TensorError> {
        let out = self.value(a).map(sigmoid_raw);
        self.record(Op::Sigmoid(a), out, "sigmoid")
    }

    pub fn tanh(&mut self, a: GraphRef) -> Result<GraphRef, TensorError> {
        let out = self.value(a).map(|v| v.tanh());
        self.record(Op::Tanh(a), out, "tanh")
    }

    pub fn abs(&mut self, a: GraphRef) -> Result<GraphRef, TensorError> {
        let out = self.value(a).map(|v| v.abs());
        self.record(Op::Abs(a), out, "abs")
    }

    /// Elementwise square root; inputs must be non-negative.
    pub fn sqrt(&mut self, a: GraphRef) -> Result<GraphRef, TensorError> {
        let out = self.value(a).map(|v| v.sqrt());
        self.record(Op::Sqrt(a), out, "sqrt")
    }

    /// Stabilized softmax over the last axis of a 2-D tensor: each output
    /// row is non-negative and sums to one.
    pub fn row_softmax(&mut self, a: GraphRef) -> Result<GraphRef, TensorError> {
        let (m, n) = self.value(a).dims2("row_softmax")?;
        let out = row_softmax_raw(self.value(a).data(), m, n);
        self.record(Op::RowSoftmax(a), Tensor::from_parts(vec![m, n], out), "row_softmax")
    }

    // ── Reductions ───────────────────────────────────────────────────

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, a: GraphRef) -> Result<GraphRef, TensorError> {
        let s: S = self.value(a).data().iter().copied().sum();
        self.record(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&mut self, a: GraphRef) -> Result<GraphRef, TensorError> {
        let n = self.value(a).numel();
        let s: S = self.value(a).data().iter().copied().sum();
        self.record(Op::Mean(a), Tensor::scalar(s / lit(n as f64)), "mean")
    }

    /// Per-row sum of a 2-D tensor: `[m×n] -> [m]`.
    pub fn sum_rows(&mut self, a: GraphRef) -> Result<GraphRef, TensorError> {
        let (m, n) = self.value(a).dims2("sum_rows")?;
        let d = self.value(a).data();
        let out: Vec<S> = (0..m).map(|i| d[i * n..(i + 1) * n].iter().copied().sum()).collect();
        self.record(Op::SumRows(a), Tensor::from_parts(vec![m], out), "sum_rows")
    }

    // ── Shape ops ────────────────────────────────────────────────────

    /// Concatenate along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, a: GraphRef, b: GraphRef) -> Result<GraphRef, TensorError> {
        let ash = self.value(a).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        let mismatch = || TensorError::ShapeMismatch { op: "concat", left: ash.clone(), right: bsh.clone() };
        if ash.len() != bsh.len() || ash.is_empty() || ash[..ash.len() - 1] != bsh[..bsh.len() - 1] {
            return Err(mismatch());
        }
        let (ca, cb) = (*ash.last().unwrap(), *bsh.last().unwrap());
        let rows = self.value(a).numel() / ca;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            out.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        let mut shape = ash;
        *shape.last_mut().unwrap() = ca + cb;
        self.record(Op::Concat(a, b), Tensor::from_parts(shape, out), "concat")
    }

    /// Slice `len` columns starting at `start` along the last axis.
    pub fn slice_cols(&mut self, a: GraphRef, start: usize, len: usize) -> Result<GraphRef, TensorError> {
        let shape = self.value(a).shape().to_vec();
        let cols = *shape.last().ok_or(TensorError::ShapeContract {
            op: "slice_cols",
            shape: shape.clone(),
            wanted: "rank >= 1",
        })?;
        if len == 0 || start + len > cols {
            return Err(TensorError::ShapeContract {
                op: "slice_cols",
                shape,
                wanted: "slice within column range",
            });
        }
        let rows = self.value(a).numel() / cols;
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&d[i * cols + start..i * cols + start + len]);
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len;
        self.record(Op::SliceCols { input: a, start, len }, Tensor::from_parts(oshape, out), "slice_cols")
    }

    /// Gather rows of a 2-D table (embedding lookup); gradients
    /// scatter-add back into the table.
    pub fn gather_rows(&mut self, table: GraphRef, rows: &[usize]) -> Result<GraphRef, TensorError> {
        let (r, c) = self.value(table).dims2("gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::RowOutOfRange { op: "gather_rows", index: bad, rows: r });
        }
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        self.record(
            Op::GatherRows { table, rows: rows.to_vec() },
            Tensor::from_parts(vec![rows.len(), c], out),
            "gather_rows",
        )
    }

    /// Reinterpret the data with a new shape of identical element count.
    pub fn reshape(&mut self, a: GraphRef, shape: Vec<usize>) -> Result<GraphRef, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(TensorError::DataLength { shape, expected: self.value(a).numel(), got: numel });
        }
        let out = Tensor::from_parts(shape, self.value(a).data().to_vec());
        self.record(Op::Reshape(a), out, "reshape")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `loss` for every registered
    /// parameter. Gradients accumulate additively across parameter uses.
    pub fn backward(&self, loss: GraphRef) -> Result<GradientMap<S>, TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), S::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            self.backward_node(id, &g, &mut grads)?;
        }

        let mut map = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                let g = grads[id].take().unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                match map.remove(&pid) {
                    None => {
                        map.insert(pid, g);
                    }
                    Some(prev) => {
                        map.insert(pid, add_same_shape(&prev, &g));
                    }
                }
            }
        }
        Ok(GradientMap { grads: map })
    }

    fn backward_node(
        &self,
        id: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let n = self.value(*b).shape()[1];
                // dA = g · Bᵀ ; dB = Aᵀ · g
                let bt = transpose_raw(self.value(*b).data(), k, n);
                let da = matmul_raw(g.data(), &bt, m, n, k);
                let at = transpose_raw(self.value(*a).data(), m, k);
                let db = matmul_raw(&at, g.data(), k, m, n);
                accumulate(grads, a.0, Tensor::from_parts(vec![m, k], da));
                accumulate(grads, b.0, Tensor::from_parts(vec![k, n], db));
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2("transpose")?;
                let da = transpose_raw(g.data(), n, m);
                accumulate(grads, a.0, Tensor::from_parts(vec![m, n], da));
            }
            Op::Add(a, b) => {
                accumulate(grads, a.0, reduce_to_shape(g, self.value(*a).shape()));
                accumulate(grads, b.0, reduce_to_shape(g, self.value(*b).shape()));
            }
            Op::Sub(a, b) => {
                accumulate(grads, a.0, reduce_to_shape(g, self.value(*a).shape()));
                let neg = g.map(|v| -v);
                accumulate(grads, b.0, reduce_to_shape(&neg, self.value(*b).shape()));
            }
            Op::Hadamard(a, b) => {
                let ga = broadcast_zip(g, self.value(*b), "hadamard", |x, y| x * y)?;
                let gb = broadcast_zip(g, self.value(*a), "hadamard", |x, y| x * y)?;
                accumulate(grads, a.0, reduce_to_shape(&ga, self.value(*a).shape()));
                accumulate(grads, b.0, reduce_to_shape(&gb, self.value(*b).shape()));
            }
            Op::Scale(a, f) => {
                let f = *f;
                accumulate(grads, a.0, g.map(|v| v * f));
            }
            Op::AddScalar(a, _) => {
                accumulate(grads, a.0, g.clone());
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let da = zip_same(g, y, |gv, yv| gv * yv * (S::one() - yv));
                accumulate(grads, a.0, da);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let da = zip_same(g, y, |gv, yv| gv * (S::one() - yv * yv));
                accumulate(grads, a.0, da);
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                let da = zip_same(g, x, |gv, xv| {
                    if xv > S::zero() {
                        gv
                    } else if xv < S::zero() {
                        -gv
                    } else {
                        S::zero()
                    }
                });
                accumulate(grads, a.0, da);
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                let half = lit::<S>(0.5);
                let da = zip_same(g, y, |gv, yv| {
                    if yv == S::zero() {
                        S::zero()
                    } else {
                        gv * half / yv
                    }
                });
                accumulate(grads, a.0, da);
            }
            Op::RowSoftmax(a) => {
                let (m, n) = node.value.dims2("row_softmax")?;
                let y = node.value.data();
                let gd = g.data();
                let mut da = vec![S::zero(); m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    let dot: S = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..n {
                        da[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, a.0, Tensor::from_parts(vec![m, n], da));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(grads, a.0, Tensor::full(self.value(*a).shape().to_vec(), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let gv = g.data()[0] / lit(n as f64);
                accumulate(grads, a.0, Tensor::full(self.value(*a).shape().to_vec(), gv));
            }
            Op::SumRows(a) => {
                let (m, n) = self.value(*a).dims2("sum_rows")?;
                let gd = g.data();
                let mut da = Vec::with_capacity(m * n);
                for i in 0..m {
                    for _ in 0..n {
                        da.push(gd[i]);
                    }
                }
                accumulate(grads, a.0, Tensor::from_parts(vec![m, n], da));
            }
            Op::Concat(a, b) => {
                let ash = self.value(*a).shape().to_vec();
                let bsh = self.value(*b).shape().to_vec();
                let (ca, cb) = (*ash.last().unwrap(), *bsh.last().unwrap());
                let rows = self.value(*a).numel() / ca;
                let gd = g.data();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for i in 0..rows {
                    let row = &gd[i * (ca + cb)..(i + 1) * (ca + cb)];
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                accumulate(grads, a.0, Tensor::from_parts(ash, da));
                accumulate(grads, b.0, Tensor::from_parts(bsh, db));
            }
            Op::SliceCols { input, start, len } => {
                let shape = self.value(*input).shape().to_vec();
                let cols = *shape.last().unwrap();
                let rows = self.value(*input).numel() / cols;
                let gd = g.data();
                let mut da = vec![S::zero(); rows * cols];
                for i in 0..rows {
                    for j in 0..*len {
                        da[i * cols + start + j] = gd[i * len + j];
                    }
                }
                accumulate(grads, input.0, Tensor::from_parts(shape, da));
            }
            Op::GatherRows { table, rows } => {
                let (r, c) = self.value(*table).dims2("gather_rows")?;
                let gd = g.data();
                let mut da = vec![S::zero(); r * c];
                for (pos, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        da[row * c + j] += gd[pos * c + j];
                    }
                }
                accumulate(grads, table.0, Tensor::from_parts(vec![r, c], da));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, a.0, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::RowBatchMatmul(a, b) => {
                let (n, k) = self.value(*a).dims2("row_batch_matmul")?;
                let c = self.value(*b).shape()[2];
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let gd = g.data();
                let mut da = vec![S::zero(); n * k];
                let mut db = vec![S::zero(); n * k * c];
                for i in 0..n {
                    for kk in 0..k {
                        let mut acc = S::zero();
                        let brow = &bd[i * k * c + kk * c..i * k * c + kk * c + c];
                        let grow = &gd[i * c..(i + 1) * c];
                        for j in 0..c {
                            acc += grow[j] * brow[j];
                            db[i * k * c + kk * c + j] = ad[i * k + kk] * grow[j];
                        }
                        da[i * k + kk] = acc;
                    }
                }
                accumulate(grads, a.0, Tensor::from_parts(vec![n, k], da));
                accumulate(grads, b.0, Tensor::from_parts(vec![n, k, c], db));
            }
        }
        Ok(())
    }
}

// ── Raw kernels and broadcast helpers ────────────────────────────────

fn sigmoid_raw<S: Scalar>(x: S) -> S {
    // Split on sign so exp never overflows.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == S::zero() {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            let orow = &mut out[i * n..i * n + n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

fn transpose_raw<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn row_softmax_raw<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &a[i * n..(i + 1) * n];
        let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut denom = S::zero();
        for j in 0..n {
            let e = (row[j] - mx).exp();
            out[i * n + j] = e;
            denom += e;
        }
        for j in 0..n {
            out[i * n + j] = out[i * n + j] / denom;
        }
    }
    out
}

fn zip_same<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn add_same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    zip_same(a, b, |x, y| x + y)
}

/// Is `small` a row vector broadcastable over matrix `big`?
fn row_broadcast(small: &[usize], big: &[usize]) -> bool {
    let cols = match small {
        [n] => *n,
        [1, n] => *n,
        _ => return false,
    };
    matches!(big, [_, n] if *n == cols)
}

/// Apply a binary function elementwise under the supported broadcasts:
/// identical shapes, scalar-with-tensor, or row-vector-with-matrix.
fn broadcast_zip<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    op: &'static str,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>, TensorError> {
    if a.shape() == b.shape() {
        return Ok(zip_same(a, b, f));
    }
    if b.is_scalar() {
        let bv = b.data()[0];
        return Ok(a.map(|x| f(x, bv)));
    }
    if a.is_scalar() {
        let av = a.data()[0];
        return Ok(Tensor::from_parts(
            b.shape().to_vec(),
            b.data().iter().map(|&y| f(av, y)).collect(),
        ));
    }
    if row_broadcast(b.shape(), a.shape()) {
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(f(a.data()[i * n + j], b.data()[j]));
            }
        }
        return Ok(Tensor::from_parts(vec![m, n], data));
    }
    if row_broadcast(a.shape(), b.shape()) {
        let (m, n) = (b.shape()[0], b.shape()[1]);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(f(a.data()[j], b.data()[i * n + j]));
            }
        }
        return Ok(Tensor::from_parts(vec![m, n], data));
    }
    Err(TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    })
}

/// Reduce a full-shape gradient back to a broadcast operand's shape by
/// summing over the broadcast positions.
fn reduce_to_shape<S: Scalar>(g: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    if g.shape() == target {
        return g.clone();
    }
    let tnumel: usize = target.iter().product();
    if tnumel == 1 {
        let s: S = g.data().iter().copied().sum();
        return Tensor::full(target.to_vec(), s);
    }
    // Row-vector target under a matrix gradient: sum over rows.
    let cols = *target.last().unwrap();
    let rows = g.numel() / cols;
    let mut out = vec![S::zero(); cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j] += g.data()[i * cols + j];
        }
    }
    Tensor::from_parts(target.to_vec(), out)
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], idx: usize, g: Tensor<S>) {
    match &mut grads[idx] {
        Some(existing) => *existing = add_same_shape(existing, &g),
        slot @ None => *slot = Some(g),
    }
}
