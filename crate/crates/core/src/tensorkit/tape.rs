//! Reverse-mode automatic differentiation over a fixed op set.
//!
//! A [`Tape`] records a DAG of eagerly-evaluated ops. Nodes only ever refer
//! to earlier nodes, so a single reverse sweep from the loss node computes
//! every gradient. Values are computed at record time; `backward` never
//! re-runs forward math except for per-row statistics that are cheaper to
//! recompute than to store.

use super::{Tensor, TensorError, EPS};
use crate::scalar::{sc, Scalar};

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[m,n] + [1,n]`, the bias pattern.
    AddRow(NodeId, NodeId),
    /// `[m,n] * [1,n]`, the per-channel modulation pattern.
    MulRow(NodeId, NodeId),
    AddConst(NodeId, S),
    Scale(NodeId, S),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId),
    Tanh(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    /// `base` plus `add` rows accumulated at the listed row indices.
    ScatterAddRows(NodeId, NodeId, Vec<usize>),
    RowMean(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    /// Pairwise rotation of column halves: `(x_i, x_{i+n/2})` rotated by the
    /// per-entry angle whose cosine/sine rows are stored in the op.
    /// `invert` rotates the other way. Used for rotary position embeddings.
    RotateHalf {
        x: NodeId,
        cos: Tensor<S>,
        sin: Tensor<S>,
        invert: bool,
    },
    /// Mean over all entries of the squared difference.
    MseMean(NodeId, NodeId),
    /// Mean over rows of `1 - cosine(pred_row, target_row)` with guarded
    /// denominator `max(|p| * |t|, 1e-8)`.
    CosRowLossMean(NodeId, NodeId),
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
}

/// Gradients from one backward sweep, aligned with tape node indices.
pub struct Grads<S> {
    list: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.list.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or a zero tensor of the given shape if the node did
    /// not influence the loss.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Tensor<S> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

/// Recording tape. Create one per forward pass; they are cheap.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Record an input (or parameter) leaf.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> TensorError {
        TensorError::Shape {
            op,
            node: self.nodes.len(),
            detail,
        }
    }

    // ── Op recording ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.value(a).shape();
        let (k2, n) = self.value(b).shape();
        if k != k2 {
            return Err(self.shape_err("matmul", format!("{m}x{k} . {k2}x{n}")));
        }
        let v = mm_nn(self.value(a), self.value(b));
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(self.shape_err(name, format!("{sa:?} vs {sb:?}")));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let v = Tensor::from_vec(sa.0, sa.1, data).expect("shape checked");
        Ok(self.push(op, v))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.value(x).shape();
        let (rr, rc) = self.value(row).shape();
        if rr != 1 || rc != n {
            return Err(self.shape_err("add_row", format!("{m}x{n} + {rr}x{rc}")));
        }
        let mut v = self.value(x).clone();
        let r = self.value(row).clone();
        for i in 0..m {
            for (j, out) in v.row_mut(i).iter_mut().enumerate() {
                *out = *out + r.data()[j];
            }
        }
        Ok(self.push(Op::AddRow(x, row), v))
    }

    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.value(x).shape();
        let (rr, rc) = self.value(row).shape();
        if rr != 1 || rc != n {
            return Err(self.shape_err("mul_row", format!("{m}x{n} * {rr}x{rc}")));
        }
        let mut v = self.value(x).clone();
        let r = self.value(row).clone();
        for i in 0..m {
            for (j, out) in v.row_mut(i).iter_mut().enumerate() {
                *out = *out * r.data()[j];
            }
        }
        Ok(self.push(Op::MulRow(x, row), v))
    }

    pub fn add_const(&mut self, x: NodeId, c: S) -> NodeId {
        let v = self.value(x).map(|e| e + c);
        self.push(Op::AddConst(x, c), v)
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let v = self.value(x).scale(c);
        self.push(Op::Scale(x, c), v)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let (m, n) = src.shape();
        let mut v = Tensor::zeros(n, m);
        for i in 0..m {
            for j in 0..n {
                v.set(j, i, src.get(i, j));
            }
        }
        self.push(Op::Transpose(x), v)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let (m, n) = src.shape();
        let mut v = Tensor::zeros(m, n);
        for i in 0..m {
            let row = src.row(i);
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                v.set(i, j, e);
                sum += e;
            }
            for j in 0..n {
                let e = v.get(i, j) / sum;
                v.set(i, j, e);
            }
        }
        self.push(Op::SoftmaxRows(x), v)
    }

    pub fn layernorm_rows(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let (m, n) = src.shape();
        let eps: S = sc(EPS);
        let nn: S = sc(n as f64);
        let mut v = Tensor::zeros(m, n);
        for i in 0..m {
            let row = src.row(i);
            let mu = row.iter().cloned().sum::<S>() / nn;
            let var = row.iter().map(|&e| (e - mu) * (e - mu)).sum::<S>() / nn;
            let inv = (var + eps).sqrt().recip();
            for j in 0..n {
                v.set(i, j, (row[j] - mu) * inv);
            }
        }
        self.push(Op::LayerNormRows(x), v)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| e.tanh());
        self.push(Op::Tanh(x), v)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (m, n) = self.value(x).shape();
        if start + len > n {
            return Err(self.shape_err("slice_cols", format!("[{start}, {start}+{len}) of {n} cols")));
        }
        let src = self.value(x);
        let mut v = Tensor::zeros(m, len);
        for i in 0..m {
            v.row_mut(i).copy_from_slice(&src.row(i)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols(x, start, len), v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_cols", "empty part list".into()));
        }
        let m = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).shape();
            if pm != m {
                return Err(self.shape_err("concat_cols", format!("row mismatch {pm} vs {m}")));
            }
            cols += pn;
        }
        let mut v = Tensor::zeros(m, cols);
        for i in 0..m {
            let mut at = 0;
            for &p in parts {
                let src = self.value(p);
                let w = src.cols();
                v.row_mut(i)[at..at + w].copy_from_slice(src.row(i));
                at += w;
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, TensorError> {
        let (m, _) = self.value(x).shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(self.shape_err("gather_rows", format!("row {bad} of {m}")));
        }
        let v = self.value(x).take_rows(idx);
        Ok(self.push(Op::GatherRows(x, idx.to_vec()), v))
    }

    pub fn scatter_add_rows(
        &mut self,
        base: NodeId,
        add: NodeId,
        idx: &[usize],
    ) -> Result<NodeId, TensorError> {
        let (m, n) = self.value(base).shape();
        let (am, an) = self.value(add).shape();
        if an != n || am != idx.len() {
            return Err(self.shape_err(
                "scatter_add_rows",
                format!("add {am}x{an} with {} indices into {m}x{n}", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(self.shape_err("scatter_add_rows", format!("row {bad} of {m}")));
        }
        let mut v = self.value(base).clone();
        let addv = self.value(add).clone();
        for (k, &i) in idx.iter().enumerate() {
            for (o, &a) in v.row_mut(i).iter_mut().zip(addv.row(k)) {
                *o = *o + a;
            }
        }
        Ok(self.push(Op::ScatterAddRows(base, add, idx.to_vec()), v))
    }

    pub fn row_mean(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let (m, n) = src.shape();
        let inv: S = sc(1.0 / m as f64);
        let mut v = Tensor::zeros(1, n);
        for i in 0..m {
            for (j, &e) in src.row(i).iter().enumerate() {
                v.data_mut()[j] += e;
            }
        }
        for e in v.data_mut() {
            *e *= inv;
        }
        self.push(Op::RowMean(x), v)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let inv: S = sc(1.0 / src.numel() as f64);
        let s = src.data().iter().cloned().sum::<S>() * inv;
        self.push(Op::MeanAll(x), Tensor::scalar(s))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().cloned().sum::<S>();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    /// Rotate column-half pairs of `x` by the angles whose cosines/sines are
    /// given per entry (first half of each row; the second half must repeat
    /// them). `invert` applies the opposite rotation.
    pub fn rotate_half(
        &mut self,
        x: NodeId,
        cos: Tensor<S>,
        sin: Tensor<S>,
        invert: bool,
    ) -> Result<NodeId, TensorError> {
        let (m, n) = self.value(x).shape();
        if n % 2 != 0 {
            return Err(self.shape_err("rotate_half", format!("odd column count {n}")));
        }
        if cos.shape() != (m, n) || sin.shape() != (m, n) {
            return Err(self.shape_err(
                "rotate_half",
                format!("cos {:?} sin {:?} for x {m}x{n}", cos.shape(), sin.shape()),
            ));
        }
        let v = rotate_half_raw(self.value(x), &cos, &sin, invert);
        Ok(self.push(Op::RotateHalf { x, cos, sin, invert }, v))
    }

    pub fn mse_mean(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        let (sp, st) = (self.value(pred).shape(), self.value(target).shape());
        if sp != st {
            return Err(self.shape_err("mse_mean", format!("{sp:?} vs {st:?}")));
        }
        let p = self.value(pred);
        let t = self.value(target);
        let inv: S = sc(1.0 / p.numel() as f64);
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<S>()
            * inv;
        Ok(self.push(Op::MseMean(pred, target), Tensor::scalar(s)))
    }

    pub fn cos_row_loss_mean(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        let (sp, st) = (self.value(pred).shape(), self.value(target).shape());
        if sp != st {
            return Err(self.shape_err("cos_row_loss_mean", format!("{sp:?} vs {st:?}")));
        }
        let p = self.value(pred);
        let t = self.value(target);
        let (m, _) = sp;
        let mut acc = S::zero();
        for i in 0..m {
            acc += S::one() - row_cosine(p.row(i), t.row(i));
        }
        let v = Tensor::scalar(acc / sc(m as f64));
        Ok(self.push(Op::CosRowLossMean(pred, target), v))
    }

    // ── Backward ──────────────────────────────────────────────────────────

    /// Reverse sweep from a `1 x 1` loss node with seed gradient one.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<S>, TensorError> {
        let (r, c) = self.value(loss).shape();
        if (r, c) != (1, 1) {
            return Err(TensorError::NonScalarLoss {
                node: loss.0,
                rows: r,
                cols: c,
            });
        }
        self.backward_seeded(loss, Tensor::scalar(S::one()))
    }

    /// Reverse sweep from an arbitrary node with an explicit upstream
    /// gradient of the same shape.
    pub fn backward_seeded(&self, at: NodeId, seed: Tensor<S>) -> Result<Grads<S>, TensorError> {
        if seed.shape() != self.value(at).shape() {
            return Err(TensorError::Invalid {
                op: "backward_seeded",
                detail: format!(
                    "seed {:?} for node of shape {:?}",
                    seed.shape(),
                    self.value(at).shape()
                ),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[at.0] = Some(seed);
        for i in (0..=at.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.accumulate_inputs(i, &g, &mut grads);
        }
        Ok(Grads { list: grads })
    }

    fn accumulate_inputs(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = mm_nt(g, self.value(*b));
                let db = mm_tn(self.value(*a), g);
                accum(grads, a.0, da);
                accum(grads, b.0, db);
            }
            Op::Add(a, b) => {
                accum(grads, a.0, g.clone());
                accum(grads, b.0, g.clone());
            }
            Op::Sub(a, b) => {
                accum(grads, a.0, g.clone());
                accum(grads, b.0, g.scale(-S::one()));
            }
            Op::Mul(a, b) => {
                let da = g
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y)| x * y)
                    .collect();
                let db = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&x, &y)| x * y)
                    .collect();
                let (m, n) = g.shape();
                accum(grads, a.0, Tensor::from_vec(m, n, da).expect("shape"));
                accum(grads, b.0, Tensor::from_vec(m, n, db).expect("shape"));
            }
            Op::AddRow(x, row) => {
                accum(grads, x.0, g.clone());
                accum(grads, row.0, col_sums(g));
            }
            Op::MulRow(x, row) => {
                let r = self.value(*row);
                let xv = self.value(*x);
                let (m, n) = g.shape();
                let mut dx = Tensor::zeros(m, n);
                let mut dr = Tensor::zeros(1, n);
                for ii in 0..m {
                    for j in 0..n {
                        let gv = g.get(ii, j);
                        dx.set(ii, j, gv * r.data()[j]);
                        dr.data_mut()[j] += gv * xv.get(ii, j);
                    }
                }
                accum(grads, x.0, dx);
                accum(grads, row.0, dr);
            }
            Op::AddConst(x, _) => accum(grads, x.0, g.clone()),
            Op::Scale(x, c) => accum(grads, x.0, g.scale(*c)),
            Op::Transpose(x) => {
                let (m, n) = g.shape();
                let mut dx = Tensor::zeros(n, m);
                for ii in 0..m {
                    for j in 0..n {
                        dx.set(j, ii, g.get(ii, j));
                    }
                }
                accum(grads, x.0, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let (m, n) = y.shape();
                let mut dx = Tensor::zeros(m, n);
                for ii in 0..m {
                    let dot = (0..n).map(|j| g.get(ii, j) * y.get(ii, j)).sum::<S>();
                    for j in 0..n {
                        dx.set(ii, j, y.get(ii, j) * (g.get(ii, j) - dot));
                    }
                }
                accum(grads, x.0, dx);
            }
            Op::LayerNormRows(x) => {
                let xv = self.value(*x);
                let y = &self.nodes[i].value;
                let (m, n) = y.shape();
                let nn: S = sc(n as f64);
                let eps: S = sc(EPS);
                let mut dx = Tensor::zeros(m, n);
                for ii in 0..m {
                    let row = xv.row(ii);
                    let mu = row.iter().cloned().sum::<S>() / nn;
                    let var = row.iter().map(|&e| (e - mu) * (e - mu)).sum::<S>() / nn;
                    let inv = (var + eps).sqrt().recip();
                    let gmean = (0..n).map(|j| g.get(ii, j)).sum::<S>() / nn;
                    let gymean = (0..n).map(|j| g.get(ii, j) * y.get(ii, j)).sum::<S>() / nn;
                    for j in 0..n {
                        let d = inv * (g.get(ii, j) - gmean - y.get(ii, j) * gymean);
                        dx.set(ii, j, d);
                    }
                }
                accum(grads, x.0, dx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[i].value;
                let dx = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * (S::one() - yv * yv))
                    .collect();
                let (m, n) = g.shape();
                accum(grads, x.0, Tensor::from_vec(m, n, dx).expect("shape"));
            }
            Op::SliceCols(x, start, len) => {
                let (m, n) = self.value(*x).shape();
                let mut dx = Tensor::zeros(m, n);
                for ii in 0..m {
                    dx.row_mut(ii)[*start..*start + *len].copy_from_slice(g.row(ii));
                }
                accum(grads, x.0, dx);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let (m, w) = self.value(*p).shape();
                    let mut dp = Tensor::zeros(m, w);
                    for ii in 0..m {
                        dp.row_mut(ii).copy_from_slice(&g.row(ii)[at..at + w]);
                    }
                    at += w;
                    accum(grads, p.0, dp);
                }
            }
            Op::GatherRows(x, idx) => {
                let (m, n) = self.value(*x).shape();
                let mut dx = Tensor::zeros(m, n);
                for (k, &src) in idx.iter().enumerate() {
                    for (o, &gv) in dx.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o = *o + gv;
                    }
                }
                accum(grads, x.0, dx);
            }
            Op::ScatterAddRows(base, add, idx) => {
                accum(grads, base.0, g.clone());
                let n = g.cols();
                let mut dadd = Tensor::zeros(idx.len(), n);
                for (k, &dst) in idx.iter().enumerate() {
                    dadd.row_mut(k).copy_from_slice(g.row(dst));
                }
                accum(grads, add.0, dadd);
            }
            Op::RowMean(x) => {
                let (m, n) = self.value(*x).shape();
                let inv: S = sc(1.0 / m as f64);
                let mut dx = Tensor::zeros(m, n);
                for ii in 0..m {
                    for j in 0..n {
                        dx.set(ii, j, g.get(0, j) * inv);
                    }
                }
                accum(grads, x.0, dx);
            }
            Op::MeanAll(x) => {
                let (m, n) = self.value(*x).shape();
                let v = g.get(0, 0) * sc(1.0 / (m * n) as f64);
                accum(grads, x.0, Tensor::filled(m, n, v));
            }
            Op::SumAll(x) => {
                let (m, n) = self.value(*x).shape();
                accum(grads, x.0, Tensor::filled(m, n, g.get(0, 0)));
            }
            Op::RotateHalf { x, cos, sin, invert } => {
                // A rotation is orthogonal: the input gradient is the upstream
                // gradient rotated the opposite way.
                let dx = rotate_half_raw(g, cos, sin, !invert);
                accum(grads, x.0, dx);
            }
            Op::MseMean(pred, target) => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let (m, n) = p.shape();
                let scale = g.get(0, 0) * sc(2.0 / p.numel() as f64);
                let mut dp = Tensor::zeros(m, n);
                for (out, (&pv, &tv)) in dp
                    .data_mut()
                    .iter_mut()
                    .zip(p.data().iter().zip(t.data()))
                {
                    *out = scale * (pv - tv);
                }
                let dt = dp.scale(-S::one());
                accum(grads, pred.0, dp);
                accum(grads, target.0, dt);
            }
            Op::CosRowLossMean(pred, target) => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let (m, n) = p.shape();
                let up = g.get(0, 0) * sc(-1.0 / m as f64);
                let mut dp = Tensor::zeros(m, n);
                let mut dt = Tensor::zeros(m, n);
                let eps: S = sc(EPS);
                for ii in 0..m {
                    let pr = p.row(ii);
                    let tr = t.row(ii);
                    let dot = pr.iter().zip(tr).map(|(&a, &b)| a * b).sum::<S>();
                    let np = pr.iter().map(|&a| a * a).sum::<S>().sqrt();
                    let nt = tr.iter().map(|&a| a * a).sum::<S>().sqrt();
                    let prod = np * nt;
                    if prod > eps {
                        let m2 = prod * prod;
                        for j in 0..n {
                            let dcos_dp = tr[j] / prod - dot * nt * pr[j] / (np * m2);
                            let dcos_dt = pr[j] / prod - dot * np * tr[j] / (nt * m2);
                            dp.set(ii, j, up * dcos_dp);
                            dt.set(ii, j, up * dcos_dt);
                        }
                    } else {
                        // Guarded denominator is constant here.
                        for j in 0..n {
                            dp.set(ii, j, up * tr[j] / eps);
                            dt.set(ii, j, up * pr[j] / eps);
                        }
                    }
                }
                accum(grads, pred.0, dp);
                accum(grads, target.0, dt);
            }
        }
    }
}

fn accum<S: Scalar>(grads: &mut [Option<Tensor<S>>], slot: usize, g: Tensor<S>) {
    match &mut grads[slot] {
        Some(existing) => {
            for (o, &v) in existing.data_mut().iter_mut().zip(g.data()) {
                *o = *o + v;
            }
        }
        None => grads[slot] = Some(g),
    }
}

fn col_sums<S: Scalar>(g: &Tensor<S>) -> Tensor<S> {
    let (m, n) = g.shape();
    let mut out = Tensor::zeros(1, n);
    for i in 0..m {
        for (j, &v) in g.row(i).iter().enumerate() {
            out.data_mut()[j] += v;
        }
    }
    out
}

fn row_cosine<S: Scalar>(a: &[S], b: &[S]) -> S {
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<S>();
    let na = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<S>().sqrt();
    dot / (na * nb).max(sc(EPS))
}

/// `C = A . B`
fn mm_nn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = a.shape();
    let n = b.cols();
    let mut c = Tensor::zeros(m, n);
    for i in 0..m {
        for kk in 0..k {
            let aik = a.get(i, kk);
            let brow = b.row(kk);
            let crow = c.row_mut(i);
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// `C = A . B^T`
fn mm_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = a.shape();
    let n = b.rows();
    debug_assert_eq!(b.cols(), k);
    let mut c = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut s = S::zero();
            for kk in 0..k {
                s += arow[kk] * brow[kk];
            }
            c.set(i, j, s);
        }
    }
    c
}

/// `C = A^T . B`
fn mm_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = a.shape();
    let n = b.cols();
    let mut c = Tensor::zeros(k, n);
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for kk in 0..k {
            let v = arow[kk];
            let crow = c.row_mut(kk);
            for j in 0..n {
                crow[j] += v * brow[j];
            }
        }
    }
    c
}

fn rotate_half_raw<S: Scalar>(
    x: &Tensor<S>,
    cos: &Tensor<S>,
    sin: &Tensor<S>,
    invert: bool,
) -> Tensor<S> {
    let (m, n) = x.shape();
    let h = n / 2;
    let mut out = Tensor::zeros(m, n);
    let sgn = if invert { -S::one() } else { S::one() };
    for i in 0..m {
        for j in 0..h {
            let (a, b) = (x.get(i, j), x.get(i, j + h));
            let (c, s) = (cos.get(i, j), sin.get(i, j) * sgn);
            out.set(i, j, a * c - b * s);
            out.set(i, j + h, b * c + a * s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensorkit::gradcheck::{check_against_fd, fd_grad};
    use proptest::prelude::*;

    fn t64(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_vec(rows, cols, vals).unwrap()
    }

    #[test]
    fn matmul_hand_value() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t64(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).to_f64_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_op_and_node() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(2, 3));
        let b = tape.leaf(Tensor::<f64>::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("node 2"), "{msg}");
    }

    #[test]
    fn softmax_of_uniform_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(1, 2, &[0.0, 0.0]));
        let y = tape.softmax_rows(x);
        assert_eq!(tape.value(y).to_f64_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(1, 3, &[1.0, 2.0, 3.0]));
        let xs = tape.leaf(t64(1, 3, &[101.0, 102.0, 103.0]));
        let y = tape.softmax_rows(x);
        let ys = tape.softmax_rows(xs);
        for (a, b) in tape.value(y).data().iter().zip(tape.value(ys).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_of_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(1, 3, &[5.0, 5.0, 5.0]));
        let y = tape.layernorm_rows(x);
        assert_eq!(tape.value(y).to_f64_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_on_single_leaf_succeeds() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0f64));
        let grads = tape.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap().get(0, 0), 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss_without_seed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(2, 2));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn cosine_loss_at_equal_vectors_has_zero_gradient() {
        let mut tape = Tape::new();
        let u = tape.leaf(t64(1, 3, &[1.0, 2.0, 3.0]));
        let v = tape.leaf(t64(1, 3, &[1.0, 2.0, 3.0]));
        let loss = tape.cos_row_loss_mean(u, v).unwrap();
        assert!(tape.value(loss).get(0, 0).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();
        for g in grads.get(u).unwrap().data() {
            assert_eq!(*g, 0.0, "gradient at the cosine maximum must vanish");
        }
    }

    #[test]
    fn mse_hand_value() {
        let mut tape = Tape::new();
        let p = tape.leaf(t64(1, 2, &[1.0, 0.0]));
        let t = tape.leaf(t64(1, 2, &[0.0, 1.0]));
        let l = tape.mse_mean(p, t).unwrap();
        assert_eq!(tape.value(l).get(0, 0), 1.0);
    }

    /// Finite-difference check harness: rebuilds the graph from a flat input
    /// vector, compares analytic gradients against central differences.
    fn fd_check_unary(
        rows: usize,
        cols: usize,
        seed: u64,
        build: impl Fn(&mut Tape<f64>, NodeId) -> NodeId,
    ) {
        let x0 = Tensor::<f64>::randn(&mut stream(seed, "fdcheck", 0), rows, cols, 0.8);
        let f = |flat: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_f64_vec(rows, cols, flat).unwrap());
            let out = build(&mut tape, x);
            // Project to a scalar through a fixed random weighting.
            let (m, n) = tape.value(out).shape();
            let proj =
                tape.leaf(Tensor::<f64>::randn(&mut stream(seed, "fdproj", 0), m, n, 1.0));
            let prod = tape.mul(out, proj).unwrap();
            let loss = tape.sum_all(prod);
            tape.value(loss).get(0, 0)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let out = build(&mut tape, x);
        let (m, n) = tape.value(out).shape();
        let proj = tape.leaf(Tensor::<f64>::randn(&mut stream(seed, "fdproj", 0), m, n, 1.0));
        let prod = tape.mul(out, proj).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().to_f64_vec();
        let numeric = fd_grad(f, &x0.to_f64_vec(), 1e-6);
        let report = check_against_fd(&analytic, &numeric, 1e-3);
        assert!(report.max_rel < 1e-6, "max rel {} at {}", report.max_rel, report.worst);
    }

    #[test]
    fn fd_softmax() {
        fd_check_unary(3, 4, 11, |t, x| t.softmax_rows(x));
    }

    #[test]
    fn fd_layernorm() {
        fd_check_unary(3, 5, 12, |t, x| t.layernorm_rows(x));
    }

    #[test]
    fn fd_tanh() {
        fd_check_unary(2, 6, 13, |t, x| t.tanh(x));
    }

    #[test]
    fn fd_transpose_matmul() {
        fd_check_unary(3, 4, 14, |t, x| {
            let xt = t.transpose(x);
            t.matmul(x, xt).unwrap()
        });
    }

    #[test]
    fn fd_rotate_half() {
        let cos = Tensor::<f64>::randn(&mut stream(7, "rot", 0), 3, 4, 1.0).map(f64::cos);
        let sin = cos.map(|c| (1.0 - c * c).sqrt());
        // Mirror the first half into the second, as rotary tables do.
        let fix = |t: &Tensor<f64>| {
            let mut out = t.clone();
            for i in 0..3 {
                let (a, b) = (out.get(i, 0), out.get(i, 1));
                out.set(i, 2, a);
                out.set(i, 3, b);
            }
            out
        };
        let (cos, sin) = (fix(&cos), fix(&sin));
        fd_check_unary(3, 4, 15, move |t, x| {
            t.rotate_half(x, cos.clone(), sin.clone(), false).unwrap()
        });
    }

    #[test]
    fn fd_gather_scatter_rowmean() {
        fd_check_unary(4, 3, 16, |t, x| {
            let g = t.gather_rows(x, &[0, 2, 2]).unwrap();
            let m = t.row_mean(g);
            let s = t.scatter_add_rows(x, m, &[1]).unwrap();
            s
        });
    }

    #[test]
    fn fd_mse_and_cosine_composite() {
        let target = Tensor::<f64>::randn(&mut stream(8, "tgt", 0), 3, 4, 1.0);
        let tt = target.clone();
        let f = move |flat: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::from_f64_vec(3, 4, flat).unwrap());
            let t = tape.leaf(tt.clone());
            let mse = tape.mse_mean(p, t).unwrap();
            let cosl = tape.cos_row_loss_mean(p, t).unwrap();
            let sc = tape.scale(cosl, 1.0);
            let tot = tape.add(mse, sc).unwrap();
            tape.value(tot).get(0, 0)
        };
        let x0 = Tensor::<f64>::randn(&mut stream(8, "pred", 0), 3, 4, 0.9);
        let mut tape = Tape::new();
        let p = tape.leaf(x0.clone());
        let t = tape.leaf(target);
        let mse = tape.mse_mean(p, t).unwrap();
        let cosl = tape.cos_row_loss_mean(p, t).unwrap();
        let scl = tape.scale(cosl, 1.0);
        let tot = tape.add(mse, scl).unwrap();
        let grads = tape.backward(tot).unwrap();
        let analytic = grads.get(p).unwrap().to_f64_vec();
        let numeric = fd_grad(f, &x0.to_f64_vec(), 1e-6);
        let report = check_against_fd(&analytic, &numeric, 1e-3);
        assert!(report.max_rel < 1e-6, "max rel {}", report.max_rel);
    }

    proptest! {
        #[test]
        fn softmax_rows_always_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 6)) {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_f64_vec(2, 3, &vals).unwrap());
            let y = tape.softmax_rows(x);
            for i in 0..2 {
                let s: f64 = tape.value(y).row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(tape.value(y).row(i).iter().all(|&v| v > 0.0));
            }
        }

        #[test]
        fn rotate_half_preserves_row_norms(vals in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_f64_vec(2, 4, &vals).unwrap());
            let mut cos = Tensor::<f64>::zeros(2, 4);
            let mut sin = Tensor::<f64>::zeros(2, 4);
            for i in 0..2 {
                for j in 0..4 {
                    let th = 0.3 + i as f64 + (j % 2) as f64;
                    cos.set(i, j, th.cos());
                    sin.set(i, j, th.sin());
                }
            }
            let y = tape.rotate_half(x, cos, sin, false).unwrap();
            for i in 0..2 {
                let nx: f64 = tape.value(x).row(i).iter().map(|v| v * v).sum();
                let ny: f64 = tape.value(y).row(i).iter().map(|v| v * v).sum();
                prop_assert!((nx - ny).abs() < 1e-10);
            }
        }
    }
}
