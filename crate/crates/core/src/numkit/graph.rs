//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Nodes compute their value at creation time (so routing decisions can look
//! at intermediate values while the graph is still being built) and record
//! the operation plus input ids. `Graph::backward` replays the tape in
//! reverse, accumulating exact gradients for every node.
//!
//! The tape also hosts the multiply-add meter: every `matmul` charges
//! `m * k * n` to the cost center active at the time the node is created.

use std::collections::BTreeMap;

use super::special::{std_normal_cdf, std_normal_pdf};
use super::tensor::{self, Tensor};

pub type NodeId = usize;

/// Attribution bucket for multiply-add accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum CostCenter {
    Embedding,
    Attention,
    DenseMlp,
    Router,
    ExpertMlp,
    Head,
    Other,
}

/// One term of a weighted gather: `out[token] += w[token, w_col] * buf[buf_row]`.
#[derive(Clone, Debug)]
pub struct CombineTerm {
    pub token: usize,
    pub buf_row: usize,
    pub w_col: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    /// Broadcast-add a `[1, n]` vector to every row.
    AddRowVec,
    /// Broadcast-subtract a `[m, 1]` column from every column.
    SubColVec,
    Scale(f64),
    Gelu,
    NormalCdf,
    SoftmaxRows,
    LayerNorm {
        eps: f64,
    },
    Sum,
    SumAxis0,
    /// Subtract a scalar node from every entry.
    SubScalar,
    /// Divide every entry by a scalar node.
    DivScalar,
    /// Per-row k-th maximum; `argk[r]` caches which column realized it.
    KthMaxRows {
        argk: Vec<usize>,
    },
    GatherRows {
        indices: Vec<usize>,
    },
    /// Entry-level gather; `src` holds one source coordinate per output entry.
    GatherEntries {
        src: Vec<(usize, usize)>,
    },
    SliceRows {
        start: usize,
        len: usize,
    },
    ConcatRows,
    ConcatCols,
    /// Row scatter into a zero-initialized buffer.
    ScatterRows {
        moves: Vec<(usize, usize)>,
    },
    /// Weighted gather of buffer rows; inputs are (buffer, weights).
    CombineRows {
        terms: Vec<CombineTerm>,
    },
    /// Mean negative log-likelihood of the target class per row.
    CrossEntropy {
        targets: Vec<usize>,
    },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Gradients per node, produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given node, if it
    /// participated in the loss.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

/// Eager reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    meter_on: bool,
    cost_center: Option<CostCenter>,
    matmul_mads: BTreeMap<CostCenter, u64>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Enable multiply-add metering for matmuls created after this call.
    pub fn enable_meter(&mut self) {
        self.meter_on = true;
    }

    /// Set the cost center charged by subsequent matmuls.
    pub fn set_cost_center(&mut self, c: CostCenter) {
        self.cost_center = Some(c);
    }

    /// Multiply-add counts per cost center since the meter was enabled.
    pub fn matmul_mads(&self) -> &BTreeMap<CostCenter, u64> {
        &self.matmul_mads
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value.scalar_value()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite value out of {:?} (shape {:?})",
            op,
            value.shape()
        );
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    /// Insert an input tensor. Every leaf may later receive a gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = tensor::matmul(self.value(a), self.value(b));
        if self.meter_on {
            let (m, k) = (self.value(a).rows(), self.value(a).cols());
            let n = self.value(b).cols();
            let center = self.cost_center.unwrap_or(CostCenter::Other);
            *self.matmul_mads.entry(center).or_insert(0) += (m * k * n) as u64;
        }
        self.push(Op::MatMul, vec![a, b], value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = tensor::transpose(self.value(a));
        self.push(Op::Transpose, vec![a], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(Op::Add, vec![a, b], value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(Op::Sub, vec![a, b], value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(Op::Mul, vec![a, b], value)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(Op::Div, vec![a, b], value)
    }

    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(v).shape(), &[1, n], "row vector shape");
        let mut out = self.value(a).clone();
        let vrow = self.value(v).data().to_vec();
        for r in 0..m {
            for c in 0..n {
                let cur = out.at(r, c);
                out.set(r, c, cur + vrow[c]);
            }
        }
        self.push(Op::AddRowVec, vec![a, v], out)
    }

    pub fn sub_col_vec(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(col).shape(), &[m, 1], "column vector shape");
        let mut out = self.value(a).clone();
        for r in 0..m {
            let cv = self.nodes[col].value.at(r, 0);
            for c in 0..n {
                let cur = out.at(r, c);
                out.set(r, c, cur - cv);
            }
        }
        self.push(Op::SubColVec, vec![a, col], out)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|v| v * factor);
        self.push(Op::Scale(factor), vec![a], value)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = tensor::gelu(self.value(a));
        self.push(Op::Gelu, vec![a], value)
    }

    pub fn normal_cdf(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(std_normal_cdf);
        self.push(Op::NormalCdf, vec![a], value)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = tensor::softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows, vec![a], value)
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (m, n) = (self.value(x).rows(), self.value(x).cols());
        assert_eq!(self.value(gamma).shape(), &[1, n]);
        assert_eq!(self.value(beta).shape(), &[1, n]);
        let mut out = Tensor::zeros(vec![m, n]);
        for r in 0..m {
            let row = self.value(x).row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..n {
                let xh = (row[c] - mean) * inv;
                out.set(r, c, xh * self.nodes[gamma].value.at(0, c) + self.nodes[beta].value.at(0, c));
            }
        }
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], out)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum, vec![a], value)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums: `[m, n] -> [1, n]`.
    pub fn sum_axis0(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        let mut out = Tensor::zeros(vec![1, n]);
        for r in 0..m {
            for c in 0..n {
                let cur = out.at(0, c);
                out.set(0, c, cur + self.value(a).at(r, c));
            }
        }
        self.push(Op::SumAxis0, vec![a], out)
    }

    pub fn sub_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let value = self.value(a).map(|v| v - sv);
        self.push(Op::SubScalar, vec![a, s], value)
    }

    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let value = self.value(a).map(|v| v / sv);
        self.push(Op::DivScalar, vec![a, s], value)
    }

    /// Per-row k-th largest entry (1-based k), as an `[m, 1]` column.
    /// Ties resolve to the lowest column index.
    pub fn kth_max_rows(&mut self, a: NodeId, k: usize) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert!(k >= 1 && k <= n, "k={k} out of range for {n} columns");
        let mut out = Tensor::zeros(vec![m, 1]);
        let mut argk = Vec::with_capacity(m);
        for r in 0..m {
            let row = self.value(a).row(r);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap().then(i.cmp(&j)));
            let col = order[k - 1];
            out.set(r, 0, row[col]);
            argk.push(col);
        }
        self.push(Op::KthMaxRows { argk }, vec![a], out)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let n = self.value(a).cols();
        let mut out = Tensor::zeros(vec![indices.len(), n]);
        for (r, &src) in indices.iter().enumerate() {
            for c in 0..n {
                out.set(r, c, self.value(a).at(src, c));
            }
        }
        self.push(Op::GatherRows { indices }, vec![a], out)
    }

    /// Gather individual entries of `a` into a `[rows, cols]` matrix;
    /// `src[r * cols + c]` names the source entry for output `(r, c)`.
    pub fn gather_entries(
        &mut self,
        a: NodeId,
        rows: usize,
        cols: usize,
        src: Vec<(usize, usize)>,
    ) -> NodeId {
        assert_eq!(src.len(), rows * cols);
        let mut out = Tensor::zeros(vec![rows, cols]);
        for (flat, &(sr, sc)) in src.iter().enumerate() {
            out.data_mut()[flat] = self.value(a).at(sr, sc);
        }
        self.push(Op::GatherEntries { src }, vec![a], out)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let n = self.value(a).cols();
        assert!(start + len <= self.value(a).rows(), "slice out of range");
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data);
        self.push(Op::SliceRows { start, len }, vec![a], out)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.value(p).cols(), n, "column mismatch in concat_rows");
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, n], data);
        self.push(Op::ConcatRows, parts.to_vec(), out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(vec![m, total]);
        let mut base = 0;
        for &p in parts {
            let pc = self.value(p).cols();
            assert_eq!(self.value(p).rows(), m, "row mismatch in concat_cols");
            for r in 0..m {
                for c in 0..pc {
                    out.set(r, base + c, self.value(p).at(r, c));
                }
            }
            base += pc;
        }
        self.push(Op::ConcatCols, parts.to_vec(), out)
    }

    /// Copy selected rows of `a` into a zeroed `[out_rows, n]` buffer.
    /// Destination rows must be distinct.
    pub fn scatter_rows(&mut self, a: NodeId, out_rows: usize, moves: Vec<(usize, usize)>) -> NodeId {
        let n = self.value(a).cols();
        let mut seen = vec![false; out_rows];
        let mut out = Tensor::zeros(vec![out_rows, n]);
        for &(src, dst) in &moves {
            assert!(src < self.value(a).rows(), "scatter source {src} out of range");
            assert!(dst < out_rows, "scatter destination {dst} out of range");
            assert!(!seen[dst], "buffer position collision at row {dst}");
            seen[dst] = true;
            for c in 0..n {
                out.set(dst, c, self.value(a).at(src, c));
            }
        }
        self.push(Op::ScatterRows { moves }, vec![a], out)
    }

    /// Weighted gather: `out[term.token] += w[term.token, term.w_col] * buf[term.buf_row]`.
    pub fn combine_rows(
        &mut self,
        buf: NodeId,
        weights: NodeId,
        out_rows: usize,
        terms: Vec<CombineTerm>,
    ) -> NodeId {
        let n = self.value(buf).cols();
        let mut out = Tensor::zeros(vec![out_rows, n]);
        for t in &terms {
            let w = self.value(weights).at(t.token, t.w_col);
            for c in 0..n {
                let cur = out.at(t.token, c);
                out.set(t.token, c, cur + w * self.value(buf).at(t.buf_row, c));
            }
        }
        self.push(Op::CombineRows { terms }, vec![buf, weights], out)
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let (m, n) = (self.value(logits).rows(), self.value(logits).cols());
        assert_eq!(targets.len(), m, "one target per row");
        let mut total = 0.0;
        for r in 0..m {
            assert!(targets[r] < n, "target {} out of range", targets[r]);
            let row = self.value(logits).row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[r]];
        }
        let out = Tensor::scalar(total / m as f64);
        self.push(Op::CrossEntropy { targets }, vec![logits], out)
    }

    /// Squared coefficient of variation of a vector node: `var(v) / mean(v)^2`
    /// with population variance.
    pub fn cv_squared(&mut self, v: NodeId) -> NodeId {
        let m = self.mean(v);
        let centered = self.sub_scalar(v, m);
        let sq = self.mul(centered, centered);
        let var = self.mean(sq);
        let m2 = self.mul(m, m);
        self.div(var, m2)
    }

    /// Reverse pass from a scalar loss node. Panics if `loss` is not scalar.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert!(
            self.value(loss).is_scalar(),
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(dy) = grads[id].take() else { continue };
            self.apply_backward(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Gradients { grads }
    }

    fn apply_backward(&self, id: NodeId, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let val = |i: usize| &self.nodes[ins[i]].value;
        let acc = |tgt: NodeId, delta: Tensor, grads: &mut [Option<Tensor>]| {
            debug_assert_eq!(delta.shape(), self.nodes[tgt].value.shape());
            match &mut grads[tgt] {
                Some(g) => {
                    let gd = g.data_mut();
                    for (gv, dv) in gd.iter_mut().zip(delta.data()) {
                        *gv += dv;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let bt = tensor::transpose(val(1));
                let at = tensor::transpose(val(0));
                acc(ins[0], tensor::matmul(dy, &bt), grads);
                acc(ins[1], tensor::matmul(&at, dy), grads);
            }
            Op::Transpose => acc(ins[0], tensor::transpose(dy), grads),
            Op::Add => {
                acc(ins[0], dy.clone(), grads);
                acc(ins[1], dy.clone(), grads);
            }
            Op::Sub => {
                acc(ins[0], dy.clone(), grads);
                acc(ins[1], dy.map(|v| -v), grads);
            }
            Op::Mul => {
                acc(ins[0], dy.zip(val(1), |d, b| d * b), grads);
                acc(ins[1], dy.zip(val(0), |d, a| d * a), grads);
            }
            Op::Div => {
                let b = val(1);
                acc(ins[0], dy.zip(b, |d, bv| d / bv), grads);
                let a = val(0);
                let db = dy
                    .zip(a, |d, av| d * av)
                    .zip(b, |num, bv| -num / (bv * bv));
                acc(ins[1], db, grads);
            }
            Op::AddRowVec => {
                acc(ins[0], dy.clone(), grads);
                let (m, n) = (dy.rows(), dy.cols());
                let mut dv = Tensor::zeros(vec![1, n]);
                for r in 0..m {
                    for c in 0..n {
                        let cur = dv.at(0, c);
                        dv.set(0, c, cur + dy.at(r, c));
                    }
                }
                acc(ins[1], dv, grads);
            }
            Op::SubColVec => {
                acc(ins[0], dy.clone(), grads);
                let (m, n) = (dy.rows(), dy.cols());
                let mut dc = Tensor::zeros(vec![m, 1]);
                for r in 0..m {
                    let s: f64 = (0..n).map(|c| dy.at(r, c)).sum();
                    dc.set(r, 0, -s);
                }
                acc(ins[1], dc, grads);
            }
            Op::Scale(f) => acc(ins[0], dy.map(|v| v * f), grads),
            Op::Gelu => {
                let dx = dy.zip(val(0), |d, x| d * (std_normal_cdf(x) + x * std_normal_pdf(x)));
                acc(ins[0], dx, grads);
            }
            Op::NormalCdf => {
                let dx = dy.zip(val(0), |d, x| d * std_normal_pdf(x));
                acc(ins[0], dx, grads);
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    let dot: f64 = (0..n).map(|c| dy.at(r, c) * y.at(r, c)).sum();
                    for c in 0..n {
                        dx.set(r, c, y.at(r, c) * (dy.at(r, c) - dot));
                    }
                }
                acc(ins[0], dx, grads);
            }
            Op::LayerNorm { eps } => {
                let x = val(0);
                let gamma = val(1);
                let (m, n) = (x.rows(), x.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                let mut dgamma = Tensor::zeros(vec![1, n]);
                let mut dbeta = Tensor::zeros(vec![1, n]);
                for r in 0..m {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        (0..n).map(|c| dy.at(r, c) * gamma.at(0, c)).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        dx.set(r, c, inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat));
                        let dg = dgamma.at(0, c);
                        dgamma.set(0, c, dg + dy.at(r, c) * xhat[c]);
                        let db = dbeta.at(0, c);
                        dbeta.set(0, c, db + dy.at(r, c));
                    }
                }
                acc(ins[0], dx, grads);
                acc(ins[1], dgamma, grads);
                acc(ins[2], dbeta, grads);
            }
            Op::Sum => {
                let d = dy.scalar_value();
                acc(ins[0], val(0).map(|_| d), grads);
            }
            Op::SumAxis0 => {
                let (m, n) = (val(0).rows(), val(0).cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    for c in 0..n {
                        dx.set(r, c, dy.at(0, c));
                    }
                }
                acc(ins[0], dx, grads);
            }
            Op::SubScalar => {
                acc(ins[0], dy.clone(), grads);
                acc(ins[1], Tensor::scalar(-dy.sum()), grads);
            }
            Op::DivScalar => {
                let s = val(1).scalar_value();
                acc(ins[0], dy.map(|v| v / s), grads);
                let ds = -dy.zip(val(0), |d, a| d * a).sum() / (s * s);
                acc(ins[1], Tensor::scalar(ds), grads);
            }
            Op::KthMaxRows { argk } => {
                let (m, n) = (val(0).rows(), val(0).cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    dx.set(r, argk[r], dy.at(r, 0));
                }
                acc(ins[0], dx, grads);
            }
            Op::GatherRows { indices } => {
                let (m, n) = (val(0).rows(), val(0).cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for (r, &src) in indices.iter().enumerate() {
                    for c in 0..n {
                        let cur = dx.at(src, c);
                        dx.set(src, c, cur + dy.at(r, c));
                    }
                }
                acc(ins[0], dx, grads);
            }
            Op::GatherEntries { src } => {
                let (m, n) = (val(0).rows(), val(0).cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for (flat, &(sr, sc)) in src.iter().enumerate() {
                    let cur = dx.at(sr, sc);
                    dx.set(sr, sc, cur + dy.data()[flat]);
                }
                acc(ins[0], dx, grads);
            }
            Op::SliceRows { start, len } => {
                let (m, n) = (val(0).rows(), val(0).cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..*len {
                    for c in 0..n {
                        dx.set(start + r, c, dy.at(r, c));
                    }
                }
                acc(ins[0], dx, grads);
            }
            Op::ConcatRows => {
                let mut row = 0;
                for &p in ins {
                    let pr = self.nodes[p].value.rows();
                    let n = self.nodes[p].value.cols();
                    let data =
                        dy.data()[row * n..(row + pr) * n].to_vec();
                    acc(p, Tensor::new(vec![pr, n], data), grads);
                    row += pr;
                }
            }
            Op::ConcatCols => {
                let m = dy.rows();
                let mut base = 0;
                for &p in ins {
                    let pc = self.nodes[p].value.cols();
                    let mut dp = Tensor::zeros(vec![m, pc]);
                    for r in 0..m {
                        for c in 0..pc {
                            dp.set(r, c, dy.at(r, base + c));
                        }
                    }
                    acc(p, dp, grads);
                    base += pc;
                }
            }
            Op::ScatterRows { moves } => {
                let (m, n) = (val(0).rows(), val(0).cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for &(src, dst) in moves {
                    for c in 0..n {
                        let cur = dx.at(src, c);
                        dx.set(src, c, cur + dy.at(dst, c));
                    }
                }
                acc(ins[0], dx, grads);
            }
            Op::CombineRows { terms } => {
                let buf = val(0);
                let w = val(1);
                let n = buf.cols();
                let mut dbuf = Tensor::zeros(buf.shape().to_vec());
                let mut dw = Tensor::zeros(w.shape().to_vec());
                for t in terms {
                    let wv = w.at(t.token, t.w_col);
                    let mut dot = 0.0;
                    for c in 0..n {
                        let cur = dbuf.at(t.buf_row, c);
                        dbuf.set(t.buf_row, c, cur + wv * dy.at(t.token, c));
                        dot += dy.at(t.token, c) * buf.at(t.buf_row, c);
                    }
                    let cur = dw.at(t.token, t.w_col);
                    dw.set(t.token, t.w_col, cur + dot);
                }
                acc(ins[0], dbuf, grads);
                acc(ins[1], dw, grads);
            }
            Op::CrossEntropy { targets } => {
                let probs = tensor::softmax_rows(val(0));
                let (m, n) = (probs.rows(), probs.cols());
                let scale = dy.scalar_value() / m as f64;
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    for c in 0..n {
                        let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                        dx.set(r, c, scale * (probs.at(r, c) - onehot));
                    }
                }
                acc(ins[0], dx, grads);
            }
        }
    }
}
