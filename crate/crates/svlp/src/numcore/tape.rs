//! Reverse-mode automatic differentiation over a recorded operation graph.
//!
//! Forward calls record one node per operation into an arena; `backward`
//! replays the nodes in reverse, accumulating vector-Jacobian products.
//! Gradient accumulation is additive and runs in tape order, so results are
//! bit-for-bit deterministic under a fixed seed. Every operation validates
//! its output for finiteness before recording.

use crate::error::{Error, Result};
use crate::numcore::store::ParameterStore;
use crate::numcore::tensor::{Real, Tensor};

/// Arena index of a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(usize);

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;
/// Tanh-form gelu constants.
const GELU_C: f64 = 0.044715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = A @ B
    Matmul { a: BufId, b: BufId },
    /// out = A @ B^T
    MatmulNt { a: BufId, b: BufId },
    /// out = A + B; B may be a broadcast row or scalar
    Add { a: BufId, b: BufId },
    /// out = A - B (same shape)
    Sub { a: BufId, b: BufId },
    /// out = A * B elementwise; B may be a broadcast row or scalar
    Mul { a: BufId, b: BufId },
    /// out = c * A for a compile-time constant c
    Scale { x: BufId, c: f64 },
    /// out = exp(A) elementwise
    Exp { x: BufId },
    /// out = layer_norm(A) along the last axis (no affine)
    LayerNorm { x: BufId },
    /// out = softmax(A) along the last axis
    Softmax { x: BufId },
    /// out = gelu(A), tanh form
    Gelu { x: BufId },
    /// out = A / ||A||_2 over all elements
    L2Normalize { x: BufId },
    /// out = rows of xs stacked
    ConcatRows { xs: Vec<BufId> },
    /// out = columns of xs stacked
    ConcatCols { xs: Vec<BufId> },
    /// out = row `row` of A as [1, cols]
    SelectRow { x: BufId, row: usize },
    /// out = A[:, start..start+len]
    SliceCols { x: BufId, start: usize, len: usize },
    /// out = A[idx, :] stacked (embedding lookup)
    GatherRows { x: BufId, idx: Vec<usize> },
    /// out = -log softmax(logits)[label], scalar
    CrossEntropy { logits: BufId, label: usize },
    /// out = <A, B> over all elements, scalar
    Dot { a: BufId, b: BufId },
    /// out = sum of all elements, scalar
    Sum { x: BufId },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    /// Flat-store offset when this leaf mirrors a parameter entry.
    param_offset: Option<usize>,
}

/// Wengert tape. Exclusively owned during a training step.
#[derive(Debug)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: BufId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op, param_offset: Option<usize>) -> BufId {
        let id = BufId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            param_offset,
        });
        id
    }

    fn push_checked(&mut self, op_name: &'static str, value: Tensor<T>, op: Op) -> Result<BufId> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push(value, op, None))
    }

    /// Record a constant leaf. Constants receive no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> BufId {
        self.push(value, Op::Leaf, None)
    }

    /// Record a trainable leaf mirroring a named store entry; gradients land
    /// at the entry's flat offset.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<BufId> {
        let value = store.get(name)?.clone();
        let offset = store.offset_of(name)?;
        Ok(self.push(value, Op::Leaf, Some(offset)))
    }

    // ---- arithmetic ----------------------------------------------------

    pub fn matmul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} @ {:?}", va.shape(), vb.shape()),
            });
        }
        let mut out = vec![T::zero(); m * n];
        mm(va.data(), vb.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push_checked("matmul", t, Op::Matmul { a, b })
    }

    /// A @ B^T where B is stored row-major [n, k].
    pub fn matmul_nt(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (n, k2) = (vb.rows(), vb.cols());
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                detail: format!("{:?} @ {:?}^T", va.shape(), vb.shape()),
            });
        }
        let mut out = vec![T::zero(); m * n];
        mm_nt(va.data(), vb.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push_checked("matmul_nt", t, Op::MatmulNt { a, b })
    }

    fn broadcast_kind(&self, op: &'static str, a: BufId, b: BufId) -> Result<Broadcast> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            return Ok(Broadcast::Same);
        }
        if vb.numel() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if vb.rows() == 1 && vb.cols() == va.cols() {
            return Ok(Broadcast::Row);
        }
        Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
        })
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let kind = self.broadcast_kind("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let cols = va.cols();
        let data: Vec<T> = match kind {
            Broadcast::Same => va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| *x + *y)
                .collect(),
            Broadcast::Scalar => {
                let s = vb.data()[0];
                va.data().iter().map(|x| *x + s).collect()
            }
            Broadcast::Row => va
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| *x + vb.data()[i % cols])
                .collect(),
        };
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push_checked("add", t, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "sub",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data: Vec<T> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x - *y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push_checked("sub", t, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let kind = self.broadcast_kind("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let cols = va.cols();
        let data: Vec<T> = match kind {
            Broadcast::Same => va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| *x * *y)
                .collect(),
            Broadcast::Scalar => {
                let s = vb.data()[0];
                va.data().iter().map(|x| *x * s).collect()
            }
            Broadcast::Row => va
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| *x * vb.data()[i % cols])
                .collect(),
        };
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push_checked("mul", t, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: BufId, c: f64) -> Result<BufId> {
        let v = self.value(x);
        let cc = T::from_f64(c);
        let data: Vec<T> = v.data().iter().map(|e| *e * cc).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push_checked("scale", t, Op::Scale { x, c })
    }

    pub fn exp(&mut self, x: BufId) -> Result<BufId> {
        let v = self.value(x);
        let data: Vec<T> = v.data().iter().map(|e| e.exp()).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push_checked("exp", t, Op::Exp { x })
    }

    // ---- normalization and activations ---------------------------------

    pub fn layer_norm(&mut self, x: BufId) -> Result<BufId> {
        let v = self.value(x);
        let cols = v.cols();
        if cols == 0 {
            return Err(Error::Empty("layer_norm input"));
        }
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            let n = T::from_f64(cols as f64);
            let mut mean = T::zero();
            for e in row {
                mean += *e;
            }
            mean = mean / n;
            let mut var = T::zero();
            for e in row {
                let d = *e - mean;
                var += d * d;
            }
            var = var / n;
            let inv = T::one() / (var + T::from_f64(LN_EPS)).sqrt();
            for e in row {
                data.push((*e - mean) * inv);
            }
        }
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push_checked("layer_norm", t, Op::LayerNorm { x })
    }

    pub fn softmax(&mut self, x: BufId) -> Result<BufId> {
        let v = self.value(x);
        let cols = v.cols();
        if cols == 0 {
            return Err(Error::Empty("softmax input"));
        }
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            let mut mx = row[0];
            for e in row {
                mx = mx.max_v(*e);
            }
            let mut sum = T::zero();
            let exps: Vec<T> = row
                .iter()
                .map(|e| {
                    let z = (*e - mx).exp();
                    sum += z;
                    z
                })
                .collect();
            for z in exps {
                data.push(z / sum);
            }
        }
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push_checked("softmax", t, Op::Softmax { x })
    }

    pub fn gelu(&mut self, x: BufId) -> Result<BufId> {
        let v = self.value(x);
        let data: Vec<T> = v.data().iter().map(|e| gelu_val(*e)).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push_checked("gelu", t, Op::Gelu { x })
    }

    /// Whole-tensor L2 normalization. A zero vector is an error: it signals a
    /// dead encoder, which tests must see.
    pub fn l2_normalize(&mut self, x: BufId) -> Result<BufId> {
        let v = self.value(x);
        let mut sq = T::zero();
        for e in v.data() {
            sq += *e * *e;
        }
        let norm = sq.sqrt();
        if norm.to_f64() < NORM_EPS {
            return Err(Error::ZeroNorm);
        }
        let data: Vec<T> = v.data().iter().map(|e| *e / norm).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push_checked("l2_normalize", t, Op::L2Normalize { x })
    }

    // ---- structure ------------------------------------------------------

    /// Stack inputs along axis 0. A 1-D input of length c counts as one row.
    pub fn concat_rows(&mut self, xs: &[BufId]) -> Result<BufId> {
        if xs.is_empty() {
            return Err(Error::Empty("concat_rows inputs"));
        }
        let cols = self.value(xs[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for id in xs {
            let v = self.value(*id);
            if v.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("column width {} vs {}", v.cols(), cols),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        self.push_checked("concat_rows", t, Op::ConcatRows { xs: xs.to_vec() })
    }

    /// Stack inputs along axis 1. All inputs must share the row count.
    pub fn concat_cols(&mut self, xs: &[BufId]) -> Result<BufId> {
        if xs.is_empty() {
            return Err(Error::Empty("concat_cols inputs"));
        }
        let rows = self.value(xs[0]).rows();
        let mut widths = Vec::with_capacity(xs.len());
        let mut total = 0;
        for id in xs {
            let v = self.value(*id);
            if v.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row count {} vs {}", v.rows(), rows),
                });
            }
            widths.push(v.cols());
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (id, w) in xs.iter().zip(&widths) {
                let v = self.value(*id);
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        self.push_checked("concat_cols", t, Op::ConcatCols { xs: xs.to_vec() })
    }

    pub fn select_row(&mut self, x: BufId, row: usize) -> Result<BufId> {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        if row >= rows {
            return Err(Error::Shape {
                op: "select_row",
                detail: format!("row {row} of {rows}"),
            });
        }
        let data = v.data()[row * cols..(row + 1) * cols].to_vec();
        let t = Tensor::new(vec![1, cols], data)?;
        self.push_checked("select_row", t, Op::SelectRow { x, row })
    }

    pub fn slice_cols(&mut self, x: BufId, start: usize, len: usize) -> Result<BufId> {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        if start + len > cols {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("cols {start}..{} of {cols}", start + len),
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        self.push_checked("slice_cols", t, Op::SliceCols { x, start, len })
    }

    /// Embedding lookup: stack rows `idx` of a table.
    pub fn gather_rows(&mut self, x: BufId, idx: &[usize]) -> Result<BufId> {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(idx.len() * cols);
        for i in idx {
            if *i >= rows {
                return Err(Error::Shape {
                    op: "gather_rows",
                    detail: format!("row {i} of {rows}"),
                });
            }
            data.extend_from_slice(&v.data()[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(vec![idx.len(), cols], data)?;
        self.push_checked("gather_rows", t, Op::GatherRows { x, idx: idx.to_vec() })
    }

    // ---- reductions and losses ------------------------------------------

    /// Cross-entropy of softmax(logits) against an integer label; stable
    /// log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: BufId, label: usize) -> Result<BufId> {
        let v = self.value(logits);
        let n = v.numel();
        if label >= n {
            return Err(Error::LabelRange(label));
        }
        let xs = v.data();
        let mut mx = xs[0];
        for e in xs {
            mx = mx.max_v(*e);
        }
        let mut sum = T::zero();
        for e in xs {
            sum += (*e - mx).exp();
        }
        let loss = mx + sum.ln() - xs[label];
        let t = Tensor::scalar(loss);
        self.push_checked("cross_entropy", t, Op::CrossEntropy { logits, label })
    }

    pub fn dot(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.numel() != vb.numel() {
            return Err(Error::Shape {
                op: "dot",
                detail: format!("{} vs {} elements", va.numel(), vb.numel()),
            });
        }
        let mut s = T::zero();
        for (x, y) in va.data().iter().zip(vb.data()) {
            s += *x * *y;
        }
        self.push_checked("dot", Tensor::scalar(s), Op::Dot { a, b })
    }

    pub fn sum(&mut self, x: BufId) -> Result<BufId> {
        let v = self.value(x);
        let mut s = T::zero();
        for e in v.data() {
            s += *e;
        }
        self.push_checked("sum", Tensor::scalar(s), Op::Sum { x })
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns the dense gradient over all
    /// `total_len` store scalars; parameters never touched stay zero. The
    /// tape cannot be swept twice.
    pub fn backward(&mut self, loss: BufId, total_len: usize) -> Result<Vec<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::NotScalar { numel });
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Leaf gradients are re-stored for the final scatter.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.backward_op(&op, i, &g, &mut grads);
        }

        let mut dense = vec![T::zero(); total_len];
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(offset), Some(g)) = (node.param_offset, &grads[i]) {
                for (slot, gv) in dense[offset..offset + g.len()].iter_mut().zip(g) {
                    *slot += *gv;
                }
            }
        }
        Ok(dense)
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], id: BufId, contrib: &[T]) {
        match &mut grads[id.0] {
            Some(g) => {
                for (slot, c) in g.iter_mut().zip(contrib) {
                    *slot += *c;
                }
            }
            None => grads[id.0] = Some(contrib.to_vec()),
        }
    }

    fn backward_op(&self, op: &Op, out_idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA = G @ B^T
                let mut da = vec![T::zero(); m * k];
                mm_nt(g, vb.data(), &mut da, m, n, k);
                Self::accumulate(grads, *a, &da);
                // dB = A^T @ G
                let mut db = vec![T::zero(); k * n];
                mm_tn(va.data(), g, &mut db, m, k, n);
                Self::accumulate(grads, *b, &db);
            }
            Op::MatmulNt { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                // out = A @ B^T; dA = G @ B, dB = G^T @ A
                let mut da = vec![T::zero(); m * k];
                mm(g, vb.data(), &mut da, m, n, k);
                Self::accumulate(grads, *a, &da);
                let mut db = vec![T::zero(); n * k];
                mm_tn(g, va.data(), &mut db, m, n, k);
                Self::accumulate(grads, *b, &db);
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g);
                self.accumulate_broadcast(*a, *b, g, grads, |x, _| x);
            }
            Op::Sub { a, b } => {
                Self::accumulate(grads, *a, g);
                let neg: Vec<T> = g.iter().map(|x| -*x).collect();
                Self::accumulate(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let cols = va.cols();
                let bn = vb.numel();
                // dA = G * broadcast(B)
                let da: Vec<T> = if va.shape() == vb.shape() {
                    g.iter().zip(vb.data()).map(|(x, y)| *x * *y).collect()
                } else if bn == 1 {
                    let s = vb.data()[0];
                    g.iter().map(|x| *x * s).collect()
                } else {
                    g.iter()
                        .enumerate()
                        .map(|(i, x)| *x * vb.data()[i % cols])
                        .collect()
                };
                Self::accumulate(grads, *a, &da);
                // dB = reduce(G * A) over the broadcast axis
                self.accumulate_broadcast(*a, *b, g, grads, |gi, ai| gi * ai);
            }
            Op::Scale { x, c } => {
                let cc = T::from_f64(*c);
                let dx: Vec<T> = g.iter().map(|e| *e * cc).collect();
                Self::accumulate(grads, *x, &dx);
            }
            Op::Exp { x } => {
                let out = self.nodes[out_idx].value.data();
                let dx: Vec<T> = g.iter().zip(out).map(|(e, o)| *e * *o).collect();
                Self::accumulate(grads, *x, &dx);
            }
            Op::LayerNorm { x } => {
                let v = self.value(*x);
                let y = self.nodes[out_idx].value.data();
                let cols = v.cols();
                let n = T::from_f64(cols as f64);
                let mut dx = vec![T::zero(); v.numel()];
                for r in 0..v.rows() {
                    let xs = &v.data()[r * cols..(r + 1) * cols];
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let mut mean = T::zero();
                    for e in xs {
                        mean += *e;
                    }
                    mean = mean / n;
                    let mut var = T::zero();
                    for e in xs {
                        let d = *e - mean;
                        var += d * d;
                    }
                    var = var / n;
                    let inv = T::one() / (var + T::from_f64(LN_EPS)).sqrt();
                    let mut g_mean = T::zero();
                    let mut gy_mean = T::zero();
                    for (gi, yi) in gs.iter().zip(ys) {
                        g_mean += *gi;
                        gy_mean += *gi * *yi;
                    }
                    g_mean = g_mean / n;
                    gy_mean = gy_mean / n;
                    for c in 0..cols {
                        dx[r * cols + c] = (gs[c] - g_mean - ys[c] * gy_mean) * inv;
                    }
                }
                Self::accumulate(grads, *x, &dx);
            }
            Op::Softmax { x } => {
                let y = self.nodes[out_idx].value.data();
                let cols = self.value(*x).cols();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.len() / cols {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let mut gy = T::zero();
                    for (gi, yi) in gs.iter().zip(ys) {
                        gy += *gi * *yi;
                    }
                    for c in 0..cols {
                        dx[r * cols + c] = ys[c] * (gs[c] - gy);
                    }
                }
                Self::accumulate(grads, *x, &dx);
            }
            Op::Gelu { x } => {
                let v = self.value(*x);
                let dx: Vec<T> = g
                    .iter()
                    .zip(v.data())
                    .map(|(gi, xi)| *gi * gelu_grad(*xi))
                    .collect();
                Self::accumulate(grads, *x, &dx);
            }
            Op::L2Normalize { x } => {
                let v = self.value(*x);
                let y = self.nodes[out_idx].value.data();
                let mut sq = T::zero();
                for e in v.data() {
                    sq += *e * *e;
                }
                let norm = sq.sqrt();
                let mut gy = T::zero();
                for (gi, yi) in g.iter().zip(y) {
                    gy += *gi * *yi;
                }
                let dx: Vec<T> = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| (*gi - *yi * gy) / norm)
                    .collect();
                Self::accumulate(grads, *x, &dx);
            }
            Op::ConcatRows { xs } => {
                let mut at = 0;
                for id in xs {
                    let n = self.value(*id).numel();
                    Self::accumulate(grads, *id, &g[at..at + n]);
                    at += n;
                }
            }
            Op::ConcatCols { xs } => {
                let rows = self.value(xs[0]).rows();
                let total: usize = xs.iter().map(|id| self.value(*id).cols()).sum();
                let mut start = 0;
                for id in xs {
                    let w = self.value(*id).cols();
                    let mut dx = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dx.extend_from_slice(&g[r * total + start..r * total + start + w]);
                    }
                    Self::accumulate(grads, *id, &dx);
                    start += w;
                }
            }
            Op::SelectRow { x, row } => {
                let v = self.value(*x);
                let cols = v.cols();
                let mut dx = vec![T::zero(); v.numel()];
                dx[row * cols..(row + 1) * cols].copy_from_slice(g);
                Self::accumulate(grads, *x, &dx);
            }
            Op::SliceCols { x, start, len } => {
                let v = self.value(*x);
                let cols = v.cols();
                let mut dx = vec![T::zero(); v.numel()];
                for r in 0..v.rows() {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                Self::accumulate(grads, *x, &dx);
            }
            Op::GatherRows { x, idx } => {
                let v = self.value(*x);
                let cols = v.cols();
                let mut dx = vec![T::zero(); v.numel()];
                for (r, i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dx[i * cols + c] += g[r * cols + c];
                    }
                }
                Self::accumulate(grads, *x, &dx);
            }
            Op::CrossEntropy { logits, label } => {
                let v = self.value(*logits);
                let xs = v.data();
                let mut mx = xs[0];
                for e in xs {
                    mx = mx.max_v(*e);
                }
                let mut sum = T::zero();
                let exps: Vec<T> = xs
                    .iter()
                    .map(|e| {
                        let z = (*e - mx).exp();
                        sum += z;
                        z
                    })
                    .collect();
                let g0 = g[0];
                let dx: Vec<T> = exps
                    .iter()
                    .enumerate()
                    .map(|(i, z)| {
                        let p = *z / sum;
                        let onehot = if i == *label { T::one() } else { T::zero() };
                        g0 * (p - onehot)
                    })
                    .collect();
                Self::accumulate(grads, *logits, &dx);
            }
            Op::Dot { a, b } => {
                let g0 = g[0];
                let da: Vec<T> = self.value(*b).data().iter().map(|y| g0 * *y).collect();
                Self::accumulate(grads, *a, &da);
                let db: Vec<T> = self.value(*a).data().iter().map(|x| g0 * *x).collect();
                Self::accumulate(grads, *b, &db);
            }
            Op::Sum { x } => {
                let g0 = g[0];
                let dx = vec![g0; self.value(*x).numel()];
                Self::accumulate(grads, *x, &dx);
            }
        }
    }

    /// Reduce an upstream gradient over the broadcast pattern of `b` relative
    /// to `a`, weighting each term by `weight(g_i, a_i)`.
    fn accumulate_broadcast(
        &self,
        a: BufId,
        b: BufId,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        weight: fn(T, T) -> T,
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let cols = va.cols();
        if va.shape() == vb.shape() {
            let db: Vec<T> = g
                .iter()
                .zip(va.data())
                .map(|(gi, ai)| weight(*gi, *ai))
                .collect();
            Self::accumulate(grads, b, &db);
        } else if vb.numel() == 1 {
            let mut s = T::zero();
            for (gi, ai) in g.iter().zip(va.data()) {
                s += weight(*gi, *ai);
            }
            Self::accumulate(grads, b, &[s]);
        } else {
            let mut db = vec![T::zero(); cols];
            for (i, (gi, ai)) in g.iter().zip(va.data()).enumerate() {
                db[i % cols] += weight(*gi, *ai);
            }
            Self::accumulate(grads, b, &db);
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

fn gelu_val<T: Real>(x: T) -> T {
    let s = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let u = s * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let s = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = s * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * s * (T::one() + three * c * x * x)
}

/// out[m,n] = a[m,k] @ b[k,n]
fn mm<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += *av * *bv;
            }
        }
    }
}

/// out[m,n] = a[m,k] @ b[n,k]^T
fn mm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                s += *av * *bv;
            }
            out[i * n + j] += s;
        }
    }
}

/// out[k,n] = a[m,k]^T @ b[m,n]
fn mm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += *av * *bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::store::ParameterStore;

    fn store_with(name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.register(name, Tensor::new(shape, data).unwrap(), true).unwrap();
        s
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let a = tape.constant(
            Tensor::new(vec![3, 3], vec![2., -1., 3., 0.5, 4., -2., 7., 1., 9.]).unwrap(),
        );
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(a).data());
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = crate::rng::SplitMix64::new(99);
        let a: Vec<f64> = (0..20).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let ta = tape.constant(Tensor::new(vec![4, 5], a.clone()).unwrap());
        let tb = tape.constant(Tensor::new(vec![5, 2], b.clone()).unwrap());
        let out = tape.matmul(ta, tb).unwrap();
        // independent naive i-j-k product
        let mut expect = vec![0.0; 8];
        for i in 0..4 {
            for j in 0..2 {
                for p in 0..5 {
                    expect[i * 2 + j] += a[i * 5 + p] * b[p * 2 + j];
                }
            }
        }
        for (got, want) in tape.value(out).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let store = store_with("w", vec![3], vec![1.0, 2.0, 3.0]);
        let mut tape = Tape::<f64>::new();
        let _w = tape.param(&store, "w").unwrap();
        let c = tape.constant(Tensor::scalar(5.0));
        let grads = tape.backward(c, store.total_len()).unwrap();
        assert_eq!(grads, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_loss_gradient_is_the_coefficient() {
        let store = store_with("w", vec![3], vec![1.0, 2.0, 3.0]);
        let xs = [4.0, -5.0, 6.0];
        let mut tape = Tape::<f64>::new();
        let w = tape.param(&store, "w").unwrap();
        let x = tape.constant(Tensor::new(vec![3], xs.to_vec()).unwrap());
        let loss = tape.dot(w, x).unwrap();
        let grads = tape.backward(loss, store.total_len()).unwrap();
        assert_eq!(grads, xs.to_vec());
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_finite_differences() {
        let logits = vec![0.7, -1.3];
        let label = 0usize;
        let grad_at = |vals: &[f64]| {
            let store = store_with("z", vec![1, 2], vals.to_vec());
            let mut tape = Tape::<f64>::new();
            let z = tape.param(&store, "z").unwrap();
            let loss = tape.cross_entropy(z, label).unwrap();
            let value = tape.value(loss).scalar_value().unwrap();
            let grads = tape.backward(loss, store.total_len()).unwrap();
            (value, grads)
        };
        let (_, analytic) = grad_at(&logits);
        // analytic should equal p - onehot
        let p0 = (logits[0]).exp() / ((logits[0]).exp() + (logits[1]).exp());
        assert!((analytic[0] - (p0 - 1.0)).abs() < 1e-12);
        assert!((analytic[1] - (1.0 - p0)).abs() < 1e-12);
        // central finite differences
        let eps = 1e-6;
        for i in 0..2 {
            let mut plus = logits.clone();
            plus[i] += eps;
            let mut minus = logits.clone();
            minus[i] -= eps;
            let fd = (grad_at(&plus).0 - grad_at(&minus).0) / (2.0 * eps);
            assert!(
                (fd - analytic[i]).abs() < 1e-6,
                "fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn l2_normalize_zero_vector_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        assert!(matches!(tape.l2_normalize(x), Err(Error::ZeroNorm)));
    }

    #[test]
    fn l2_normalize_output_has_unit_norm() {
        let mut rng = crate::rng::SplitMix64::new(5);
        for _ in 0..20 {
            let data: Vec<f64> = (0..8).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::new(vec![8], data).unwrap());
            let y = tape.l2_normalize(x).unwrap();
            let norm: f64 = tape.value(y).data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let store = store_with("w", vec![1], vec![2.0]);
        let mut tape = Tape::<f64>::new();
        let w = tape.param(&store, "w").unwrap();
        let loss = tape.sum(w).unwrap();
        tape.backward(loss, 1).unwrap();
        let mut tape2 = Tape::<f64>::new();
        let w2 = tape2.param(&store, "w").unwrap();
        let loss2 = tape2.sum(w2).unwrap();
        tape2.backward(loss2, 1).unwrap();
        assert!(matches!(tape2.backward(loss2, 1), Err(Error::TapeConsumed)));
        drop(tape);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backward(x, 0),
            Err(Error::NotScalar { numel: 2 })
        ));
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let store = store_with("tab", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut tape = Tape::<f64>::new();
        let tab = tape.param(&store, "tab").unwrap();
        let picked = tape.gather_rows(tab, &[0, 0, 1]).unwrap();
        let loss = tape.sum(picked).unwrap();
        let grads = tape.backward(loss, store.total_len()).unwrap();
        assert_eq!(grads, vec![2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        // A small chain touching most ops: layer_norm, gelu, softmax slices,
        // concat, matmul, normalization, dot, exp, cross entropy.
        let eval = |vals: &[f64]| -> (f64, Vec<f64>) {
            let mut store = ParameterStore::<f64>::new();
            store
                .register("w", Tensor::new(vec![4, 4], vals[..16].to_vec()).unwrap(), true)
                .unwrap();
            store
                .register("v", Tensor::new(vec![1, 4], vals[16..].to_vec()).unwrap(), true)
                .unwrap();
            let mut tape = Tape::<f64>::new();
            let w = tape.param(&store, "w").unwrap();
            let v = tape.param(&store, "v").unwrap();
            let x = tape.constant(
                Tensor::new(vec![2, 4], vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9, -1.2, 0.5]).unwrap(),
            );
            let h = tape.matmul(x, w).unwrap();
            let h = tape.layer_norm(h).unwrap();
            let h = tape.gelu(h).unwrap();
            let attn = tape.matmul_nt(h, h).unwrap();
            let attn = tape.softmax(attn).unwrap();
            let mixed = tape.matmul(attn, h).unwrap();
            let row = tape.select_row(mixed, 0).unwrap();
            let nr = tape.l2_normalize(row).unwrap();
            let nv = tape.l2_normalize(v).unwrap();
            let d = tape.dot(nr, nv).unwrap();
            let e = tape.exp(d).unwrap();
            let pair = tape.concat_cols(&[d, e]).unwrap();
            let loss = tape.cross_entropy(pair, 1).unwrap();
            let value = tape.value(loss).scalar_value().unwrap();
            let grads = tape.backward(loss, store.total_len()).unwrap();
            (value, grads)
        };
        let mut rng = crate::rng::SplitMix64::new(2024);
        let theta: Vec<f64> = (0..20).map(|_| rng.normal() * 0.5).collect();
        let (_, analytic) = eval(&theta);
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus[i] += eps;
            let mut minus = theta.clone();
            minus[i] -= eps;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
            let denom = (analytic[i].abs() + fd.abs()).max(1e-12);
            worst = worst.max((analytic[i] - fd).abs() / denom);
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }
}
