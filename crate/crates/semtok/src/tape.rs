//! Reverse-mode autodiff over a flat op arena.
//!
//! Nodes live in insertion order in a `Vec`; building an op validates shapes
//! (returning an error that names the offending nodes) and eagerly computes
//! the value. `forward` re-evaluates every node in insertion order — used
//! after mutating a leaf, e.g. by the finite-difference oracle — and
//! `backward` replays the ops in reverse exactly once, accumulating
//! vector-Jacobian products. Evaluation is pure and sequential, so repeated
//! runs over the same graph are bit-identical.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Divisor guard for row normalization: rows are divided by
/// `sqrt(‖x‖² + EPS²)`, which is exactly `‖x‖` for any row of practical
/// magnitude but keeps the op differentiable at the origin.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A·B
    MatMul { a: NodeId, b: NodeId },
    /// C = A·Bᵀ
    MatMulTB { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Neg { a: NodeId },
    Scale { a: NodeId, c: f64 },
    /// Matrix plus a vector broadcast across rows: out[i][j] = a[i][j] + v[j].
    AddRowVec { a: NodeId, v: NodeId },
    /// Matrix plus a vector broadcast across columns: out[i][j] = a[i][j] + v[i].
    AddColVec { a: NodeId, v: NodeId },
    /// Row i scaled by s[i].
    ScaleRows { a: NodeId, s: NodeId },
    Relu { a: NodeId },
    Log { a: NodeId },
    RowSoftmax { a: NodeId },
    /// Rows divided by sqrt(‖row‖² + NORMALIZE_EPS²).
    RowNormalize { a: NodeId },
    /// [r,c] → [r], sum across each row.
    RowSums { a: NodeId },
    /// Anything → [1].
    Sum { a: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    /// Column j of a matrix, as a [r] vector.
    Col { a: NodeId, j: usize },
    /// Main diagonal of a square matrix, as a [r] vector.
    Diag { a: NodeId },
    /// Per-row log-sum-exp over the entries whose mask bit is set.
    RowLogSumExpMasked { a: NodeId, mask: Vec<bool> },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`]. Nodes the loss does not
/// depend on have no entry.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of the given shape if the loss never
    /// touched it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, ids: &[NodeId], extra: &str) -> Error {
        let parts: Vec<String> = ids
            .iter()
            .map(|id| format!("node {} {:?}", id.0, self.shape(*id)))
            .collect();
        Error::ShapeMismatch { op, details: format!("{}{}", parts.join(", "), extra) }
    }

    fn want_matrix(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            _ => Err(self.mismatch(op, &[id], " — expected a 2-D matrix")),
        }
    }

    // ── graph construction ───────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.leaf(Tensor::scalar(value))
    }

    /// Replaces a leaf's value; shape must match. The rest of the graph is
    /// stale until [`Tape::forward`] runs.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        if !matches!(self.nodes[id.0].op, Op::Leaf) {
            return Err(Error::InvalidInput(format!("node {} is not a leaf", id.0)));
        }
        if value.shape() != self.shape(id) {
            return Err(self.mismatch("set_leaf", &[id], &format!(" — new value {:?}", value.shape())));
        }
        self.nodes[id.0].value = value;
        Ok(())
    }

    /// Adds `delta` to one element of a leaf (finite-difference probes).
    pub fn nudge_leaf(&mut self, id: NodeId, index: usize, delta: f64) -> Result<()> {
        if !matches!(self.nodes[id.0].op, Op::Leaf) {
            return Err(Error::InvalidInput(format!("node {} is not a leaf", id.0)));
        }
        let data = self.nodes[id.0].value.data_mut();
        if index >= data.len() {
            return Err(Error::InvalidInput(format!(
                "index {} out of bounds for leaf of {} elements",
                index,
                data.len()
            )));
        }
        data[index] += delta;
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, ka) = self.want_matrix("matmul", a)?;
        let (kb, _) = self.want_matrix("matmul", b)?;
        if ka != kb {
            return Err(self.mismatch("matmul", &[a, b], ""));
        }
        let value = tensor::matmul(self.value(a), self.value(b));
        Ok(self.push(Op::MatMul { a, b }, value))
    }

    /// A·Bᵀ — rows of `b` are dotted against rows of `a`.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, ka) = self.want_matrix("matmul_tb", a)?;
        let (_, kb) = self.want_matrix("matmul_tb", b)?;
        if ka != kb {
            return Err(self.mismatch("matmul_tb", &[a, b], ""));
        }
        let value = tensor::matmul_tb(self.value(a), self.value(b));
        Ok(self.push(Op::MatMulTB { a, b }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, &[a, b], ""));
        }
        let value = zip_tensors(self.value(a), self.value(b), f);
        Ok(self.push(op, value))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let value = map_tensor(self.value(a), |x| -x);
        Ok(self.push(Op::Neg { a }, value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = map_tensor(self.value(a), |x| c * x);
        Ok(self.push(Op::Scale { a, c }, value))
    }

    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (_, c) = self.want_matrix("add_row_vec", a)?;
        if self.shape(v) != [c] {
            return Err(self.mismatch("add_row_vec", &[a, v], " — vector must match column count"));
        }
        let value = eval_add_row_vec(self.value(a), self.value(v));
        Ok(self.push(Op::AddRowVec { a, v }, value))
    }

    pub fn add_col_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, _) = self.want_matrix("add_col_vec", a)?;
        if self.shape(v) != [r] {
            return Err(self.mismatch("add_col_vec", &[a, v], " — vector must match row count"));
        }
        let value = eval_add_col_vec(self.value(a), self.value(v));
        Ok(self.push(Op::AddColVec { a, v }, value))
    }

    pub fn scale_rows(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (r, _) = self.want_matrix("scale_rows", a)?;
        if self.shape(s) != [r] {
            return Err(self.mismatch("scale_rows", &[a, s], " — scale must match row count"));
        }
        let value = eval_scale_rows(self.value(a), self.value(s));
        Ok(self.push(Op::ScaleRows { a, s }, value))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = map_tensor(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        Ok(self.push(Op::Relu { a }, value))
    }

    /// Natural log; caller guarantees strictly positive inputs.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let value = map_tensor(self.value(a), f64::ln);
        Ok(self.push(Op::Log { a }, value))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.want_matrix("row_softmax", a)?;
        let value = eval_row_softmax(self.value(a));
        Ok(self.push(Op::RowSoftmax { a }, value))
    }

    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.want_matrix("row_normalize", a)?;
        let value = eval_row_normalize(self.value(a));
        Ok(self.push(Op::RowNormalize { a }, value))
    }

    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        self.want_matrix("row_sums", a)?;
        let value = eval_row_sums(self.value(a));
        Ok(self.push(Op::RowSums { a }, value))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        Ok(self.push(Op::Sum { a }, value))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_cols of zero parts".into()));
        }
        let (r, _) = self.want_matrix("concat_cols", parts[0])?;
        for p in parts {
            let (rp, _) = self.want_matrix("concat_cols", *p)?;
            if rp != r {
                return Err(self.mismatch("concat_cols", &[parts[0], *p], " — row counts differ"));
            }
        }
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let value = eval_concat_cols(&values);
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, value))
    }

    pub fn col(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        let (_, c) = self.want_matrix("col", a)?;
        if j >= c {
            return Err(self.mismatch("col", &[a], &format!(" — column {j} out of range")));
        }
        let value = eval_col(self.value(a), j);
        Ok(self.push(Op::Col { a, j }, value))
    }

    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.want_matrix("diag", a)?;
        if r != c {
            return Err(self.mismatch("diag", &[a], " — matrix must be square"));
        }
        let value = eval_diag(self.value(a));
        Ok(self.push(Op::Diag { a }, value))
    }

    /// Per-row `log Σ exp` restricted to masked-in entries. Every row must
    /// keep at least one entry, otherwise the reduction is empty.
    pub fn row_logsumexp_masked(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        let (r, c) = self.want_matrix("row_logsumexp_masked", a)?;
        if mask.len() != r * c {
            return Err(self.mismatch(
                "row_logsumexp_masked",
                &[a],
                &format!(" — mask has {} bits, want {}", mask.len(), r * c),
            ));
        }
        for i in 0..r {
            if !mask[i * c..(i + 1) * c].iter().any(|m| *m) {
                return Err(Error::InvalidInput(format!(
                    "row_logsumexp_masked: row {i} has an empty mask"
                )));
            }
        }
        let value = eval_row_lse_masked(self.value(a), &mask);
        Ok(self.push(Op::RowLogSumExpMasked { a, mask }, value))
    }

    // ── evaluation ───────────────────────────────────────────────────────

    /// Recomputes every non-leaf value in insertion order. Call after
    /// mutating leaves.
    pub fn forward(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.eval(&self.nodes[i].op.clone());
            self.nodes[i].value = value;
        }
    }

    fn eval(&self, op: &Op) -> Tensor {
        match op {
            Op::Leaf => unreachable!("leaves are never re-evaluated"),
            Op::MatMul { a, b } => tensor::matmul(self.value(*a), self.value(*b)),
            Op::MatMulTB { a, b } => tensor::matmul_tb(self.value(*a), self.value(*b)),
            Op::Add { a, b } => zip_tensors(self.value(*a), self.value(*b), |x, y| x + y),
            Op::Sub { a, b } => zip_tensors(self.value(*a), self.value(*b), |x, y| x - y),
            Op::Mul { a, b } => zip_tensors(self.value(*a), self.value(*b), |x, y| x * y),
            Op::Neg { a } => map_tensor(self.value(*a), |x| -x),
            Op::Scale { a, c } => {
                let c = *c;
                map_tensor(self.value(*a), move |x| c * x)
            }
            Op::AddRowVec { a, v } => eval_add_row_vec(self.value(*a), self.value(*v)),
            Op::AddColVec { a, v } => eval_add_col_vec(self.value(*a), self.value(*v)),
            Op::ScaleRows { a, s } => eval_scale_rows(self.value(*a), self.value(*s)),
            Op::Relu { a } => map_tensor(self.value(*a), |x| if x > 0.0 { x } else { 0.0 }),
            Op::Log { a } => map_tensor(self.value(*a), f64::ln),
            Op::RowSoftmax { a } => eval_row_softmax(self.value(*a)),
            Op::RowNormalize { a } => eval_row_normalize(self.value(*a)),
            Op::RowSums { a } => eval_row_sums(self.value(*a)),
            Op::Sum { a } => Tensor::scalar(self.value(*a).data().iter().sum()),
            Op::ConcatCols { parts } => {
                let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
                eval_concat_cols(&values)
            }
            Op::Col { a, j } => eval_col(self.value(*a), *j),
            Op::Diag { a } => eval_diag(self.value(*a)),
            Op::RowLogSumExpMasked { a, mask } => eval_row_lse_masked(self.value(*a), mask),
        }
    }

    /// Accumulates d(loss)/d(node) for every node the scalar `loss` depends
    /// on, visiting each node exactly once in reverse insertion order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if loss_shape != [1] {
            return Err(Error::NonScalarLoss { node: loss.0, shape: loss_shape.to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let da = tensor::matmul_tb(&g, self.value(*b));
                    let db = tensor::matmul_ta(self.value(*a), &g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulTB { a, b } => {
                    let da = tensor::matmul(&g, self.value(*b));
                    let db = tensor::matmul_ta(&g, self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub { a, b } => {
                    let db = map_tensor(&g, |x| -x);
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, db);
                }
                Op::Mul { a, b } => {
                    let da = zip_tensors(&g, self.value(*b), |x, y| x * y);
                    let db = zip_tensors(&g, self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Neg { a } => acc(&mut grads, *a, map_tensor(&g, |x| -x)),
                Op::Scale { a, c } => {
                    let c = *c;
                    acc(&mut grads, *a, map_tensor(&g, move |x| c * x));
                }
                Op::AddRowVec { a, v } => {
                    let (r, c) = (g.rows(), g.cols());
                    let mut dv = Tensor::zeros(&[c]);
                    for i in 0..r {
                        for (j, dvj) in dv.data_mut().iter_mut().enumerate() {
                            *dvj += g.data()[i * c + j];
                        }
                    }
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *v, dv);
                }
                Op::AddColVec { a, v } => {
                    let dv = eval_row_sums(&g);
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *v, dv);
                }
                Op::ScaleRows { a, s } => {
                    let av = self.value(*a);
                    let sv = self.value(*s);
                    let (r, c) = (g.rows(), g.cols());
                    let mut da = Tensor::zeros(&[r, c]);
                    let mut ds = Tensor::zeros(&[r]);
                    for i in 0..r {
                        let si = sv.data()[i];
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let arow = &av.data()[i * c..(i + 1) * c];
                        let darow = &mut da.data_mut()[i * c..(i + 1) * c];
                        let mut acc_s = 0.0;
                        for j in 0..c {
                            darow[j] = grow[j] * si;
                            acc_s += grow[j] * arow[j];
                        }
                        ds.data_mut()[i] = acc_s;
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *s, ds);
                }
                Op::Relu { a } => {
                    // Slope at exactly zero is defined as 0.
                    let da = zip_tensors(&g, self.value(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    acc(&mut grads, *a, da);
                }
                Op::Log { a } => {
                    let da = zip_tensors(&g, self.value(*a), |gi, xi| gi / xi);
                    acc(&mut grads, *a, da);
                }
                Op::RowSoftmax { a } => {
                    let y = &self.nodes[id].value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut da = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let yrow = y.row(i);
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let s = tensor::dot(grow, yrow);
                        let darow = &mut da.data_mut()[i * c..(i + 1) * c];
                        for j in 0..c {
                            darow[j] = yrow[j] * (grow[j] - s);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::RowNormalize { a } => {
                    let x = self.value(*a);
                    let y = &self.nodes[id].value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut da = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let xrow = x.row(i);
                        let yrow = y.row(i);
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let div = (tensor::dot(xrow, xrow) + NORMALIZE_EPS * NORMALIZE_EPS).sqrt();
                        let gy = tensor::dot(grow, yrow);
                        let darow = &mut da.data_mut()[i * c..(i + 1) * c];
                        for j in 0..c {
                            darow[j] = (grow[j] - gy * yrow[j]) / div;
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::RowSums { a } => {
                    let (r, c) = {
                        let s = self.shape(*a);
                        (s[0], s[1])
                    };
                    let mut da = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let gi = g.data()[i];
                        for v in &mut da.data_mut()[i * c..(i + 1) * c] {
                            *v = gi;
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::Sum { a } => {
                    let gi = g.item();
                    acc(&mut grads, *a, Tensor::filled(self.shape(*a), gi));
                }
                Op::ConcatCols { parts } => {
                    let r = g.rows();
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.shape(*p)[1];
                        let mut dp = Tensor::zeros(&[r, pc]);
                        for i in 0..r {
                            let grow = &g.data()[i * g.cols() + offset..i * g.cols() + offset + pc];
                            dp.row_mut(i).copy_from_slice(grow);
                        }
                        acc(&mut grads, *p, dp);
                        offset += pc;
                    }
                }
                Op::Col { a, j } => {
                    let s = self.shape(*a);
                    let (r, c) = (s[0], s[1]);
                    let mut da = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        da.data_mut()[i * c + j] = g.data()[i];
                    }
                    acc(&mut grads, *a, da);
                }
                Op::Diag { a } => {
                    let r = self.shape(*a)[0];
                    let mut da = Tensor::zeros(&[r, r]);
                    for i in 0..r {
                        da.data_mut()[i * r + i] = g.data()[i];
                    }
                    acc(&mut grads, *a, da);
                }
                Op::RowLogSumExpMasked { a, mask } => {
                    let x = self.value(*a);
                    let y = &self.nodes[id].value;
                    let (r, c) = (x.rows(), x.cols());
                    let mut da = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let gi = g.data()[i];
                        let yi = y.data()[i];
                        let xrow = x.row(i);
                        let darow = &mut da.data_mut()[i * c..(i + 1) * c];
                        for j in 0..c {
                            if mask[i * c + j] {
                                darow[j] = gi * (xrow[j] - yi).exp();
                            }
                        }
                    }
                    acc(&mut grads, *a, da);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(t) => tensor::axpy(1.0, &delta, t),
        slot @ None => *slot = Some(delta),
    }
}

// ── op kernels shared by eager build and forward() ───────────────────────

fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = t.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

fn zip_tensors(a: &Tensor, b: &Tensor, f: fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    for (o, y) in out.data_mut().iter_mut().zip(b.data()) {
        *o = f(*o, *y);
    }
    out
}

fn eval_add_row_vec(a: &Tensor, v: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = a.clone();
    for i in 0..r {
        let orow = &mut out.data_mut()[i * c..(i + 1) * c];
        for (o, vj) in orow.iter_mut().zip(v.data()) {
            *o += vj;
        }
    }
    out
}

fn eval_add_col_vec(a: &Tensor, v: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = a.clone();
    for i in 0..r {
        let vi = v.data()[i];
        for o in &mut out.data_mut()[i * c..(i + 1) * c] {
            *o += vi;
        }
    }
    out
}

fn eval_scale_rows(a: &Tensor, s: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = a.clone();
    for i in 0..r {
        let si = s.data()[i];
        for o in &mut out.data_mut()[i * c..(i + 1) * c] {
            *o *= si;
        }
    }
    out
}

fn eval_row_softmax(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = a.clone();
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn eval_row_normalize(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = a.clone();
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let div = (tensor::dot(row, row) + NORMALIZE_EPS * NORMALIZE_EPS).sqrt();
        for v in row.iter_mut() {
            *v /= div;
        }
    }
    out
}

fn eval_row_sums(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(&[r]);
    for i in 0..r {
        out.data_mut()[i] = a.data()[i * c..(i + 1) * c].iter().sum();
    }
    out
}

fn eval_concat_cols(parts: &[&Tensor]) -> Tensor {
    let r = parts[0].rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor::zeros(&[r, total]);
    for i in 0..r {
        let orow = out.row_mut(i);
        let mut offset = 0;
        for p in parts {
            let pc = p.cols();
            orow[offset..offset + pc].copy_from_slice(p.row(i));
            offset += pc;
        }
    }
    out
}

fn eval_col(a: &Tensor, j: usize) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(&[r]);
    for i in 0..r {
        out.data_mut()[i] = a.data()[i * c + j];
    }
    out
}

fn eval_diag(a: &Tensor) -> Tensor {
    let r = a.rows();
    let mut out = Tensor::zeros(&[r]);
    for i in 0..r {
        out.data_mut()[i] = a.data()[i * r + i];
    }
    out
}

fn eval_row_lse_masked(a: &Tensor, mask: &[bool]) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(&[r]);
    for i in 0..r {
        let row = a.row(i);
        let mut mx = f64::NEG_INFINITY;
        for j in 0..c {
            if mask[i * c + j] && row[j] > mx {
                mx = row[j];
            }
        }
        let mut total = 0.0;
        for j in 0..c {
            if mask[i * c + j] {
                total += (row[j] - mx).exp();
            }
        }
        out.data_mut()[i] = mx + total.ln();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        assert_eq!(tape.value(loss).item(), 9.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn log_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.log(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(x).unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_matvec_gradient_mirrors_input() {
        let mut tape = Tape::new();
        let eye = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.7, -1.3]).unwrap());
        let y = tape.matmul(x, eye).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
        // d(Σ xW)/dW = xᵀ·1 — each W column sees the input vector.
        assert_eq!(grads.get(eye).unwrap().data(), &[0.7, 0.7, -1.3, -1.3]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
        let p = tape.row_softmax(x).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
        // Gradient of Σp is zero: softmax outputs sum to one regardless of logits.
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        for v in grads.get(x).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn relu_kink_has_zero_slope() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_offending_nodes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("node 0") && msg.contains("node 1"), "{msg}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn forward_reevaluates_after_leaf_update() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.set_leaf(x, Tensor::scalar(4.0)).unwrap();
        tape.forward();
        assert_eq!(tape.value(y).item(), 16.0);
    }

    #[test]
    fn forward_is_bit_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![0.3, -1.7, 2.9, 0.01]).unwrap());
        let s = tape.row_softmax(x).unwrap();
        let n = tape.row_normalize(s).unwrap();
        let first = tape.value(n).clone();
        for _ in 0..3 {
            tape.forward();
            assert_eq!(tape.value(n), &first);
        }
    }

    #[test]
    fn concat_cols_roundtrips_pieces() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let cat = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(cat).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().shape(), &[2, 1]);
        assert_eq!(grads.get(b).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn masked_lse_ignores_masked_entries() {
        let mut tape = Tape::new();
        // Second column masked out; LSE over a single entry is the entry itself.
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 100.0, -2.0, 50.0]).unwrap());
        let lse = tape.row_logsumexp_masked(x, vec![true, false, true, false]).unwrap();
        let got = tape.value(lse).data().to_vec();
        assert!((got[0] - 1.0).abs() < 1e-12 && (got[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn masked_lse_rejects_empty_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2]));
        assert!(tape.row_logsumexp_masked(x, vec![false, false]).is_err());
    }
}
