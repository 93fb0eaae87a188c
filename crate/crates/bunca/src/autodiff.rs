//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass in topological
//! order; [`Tape::backward`] walks it once in reverse and accumulates exact
//! gradients. Sparse graph products treat the graph as structure: gradient
//! flows to the dense operand (and to per-edge attention weights where those
//! are themselves tape values), never into the normalization weights.

use std::sync::Arc;

use crate::par;
use crate::sparse::{spmv_block, spmv_block_transpose, EdgeMask, NormalizedAdjacency, SparseBinaryMatrix};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input node. `param` links back to a parameter slot for grad export.
    Leaf { param: Option<usize> },
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulNT(NodeId, NodeId),
    /// Structural graph product: grad flows to the features only.
    Spmv { adj: Arc<NormalizedAdjacency>, x: NodeId },
    /// Sparse product with learnable per-edge weights (CSR edge order).
    SpmmEdges { mask: Arc<EdgeMask>, w: NodeId, x: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    MulElem(NodeId, NodeId),
    /// Broadcast a 1×d row onto every row of a.
    AddRow { a: NodeId, row: NodeId },
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows { a: NodeId, start: usize, len: usize },
    GatherRows { a: NodeId, idx: Arc<Vec<usize>> },
    /// Row g of the output is the mean of a's rows listed in group g;
    /// empty groups give a zero row.
    MeanPoolRows { a: NodeId, groups: Arc<SparseBinaryMatrix> },
    Exp(NodeId),
    Leaky { a: NodeId, slope: f64 },
    RowNormalize { a: NodeId, clamp: f64 },
    CosineRows { a: NodeId, b: NodeId, clamp: f64 },
    /// Row-softmax of per-edge scores over the mask support (max-shifted;
    /// the eps floor only guards empty rows, which come out exactly zero).
    MaskedSoftmax { scores: NodeId, mask: Arc<EdgeMask> },
    RowDot(NodeId, NodeId),
    TakeDiag(NodeId),
    LogSumExpRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SqNorm(NodeId),
    Softplus(NodeId),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.by_node[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// (parameter slot, leaf node) pairs recorded by [`Tape::param`].
    pub fn leaf_bindings(&self) -> Vec<(usize, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(p) } => Some((p, NodeId(i))),
                _ => None,
            })
            .collect()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let m = self.value(id);
        assert_eq!(m.numel(), 1, "expected scalar node");
        m.data[0]
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf { param } => param.is_some(),
            _ => self.op_parents(&op).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn op_parents(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::MulElem(a, b)
            | Op::ConcatRows(a, b)
            | Op::ConcatCols(a, b)
            | Op::RowDot(a, b)
            | Op::CosineRows { a, b, .. }
            | Op::AddRow { a, row: b }
            | Op::SpmmEdges { w: a, x: b, .. } => vec![*a, *b],
            Op::Spmv { x, .. } => vec![*x],
            Op::Scale(a, _)
            | Op::SliceRows { a, .. }
            | Op::GatherRows { a, .. }
            | Op::MeanPoolRows { a, .. }
            | Op::Exp(a)
            | Op::Leaky { a, .. }
            | Op::RowNormalize { a, .. }
            | Op::MaskedSoftmax { scores: a, .. }
            | Op::TakeDiag(a)
            | Op::LogSumExpRows(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SqNorm(a)
            | Op::Softplus(a) => vec![*a],
        }
    }

    // ---- node constructors -------------------------------------------------

    /// Register a trainable input; `param` is the caller's parameter slot.
    pub fn param(&mut self, param: usize, value: Mat) -> NodeId {
        self.push(value, Op::Leaf { param: Some(param) })
    }

    /// Register a constant input (no gradient).
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn spmv(&mut self, adj: Arc<NormalizedAdjacency>, x: NodeId) -> NodeId {
        let v = spmv_block(&adj, self.value(x));
        self.push(v, Op::Spmv { adj, x })
    }

    pub fn spmm_edges(&mut self, mask: Arc<EdgeMask>, w: NodeId, x: NodeId) -> NodeId {
        let wm = self.value(w);
        let xm = self.value(x);
        assert_eq!(wm.rows, mask.n_edges(), "edge weight count != mask edges");
        assert_eq!(wm.cols, 1, "edge weights must be a column");
        assert_eq!(xm.rows, mask.n_items(), "feature rows != mask items");
        let cols = xm.cols;
        let mut out = Mat::zeros(mask.n_items(), cols);
        {
            let csr = &mask.csr;
            let w_data = &wm.data;
            let threshold = par::row_threshold(mask.n_edges() * cols);
            par::for_each_row(&mut out.data, cols.max(1), threshold, |i, row| {
                let lo = csr.row_offsets[i];
                let hi = csr.row_offsets[i + 1];
                for e in lo..hi {
                    let j = csr.col_indices[e];
                    let we = w_data[e];
                    for (o, &s) in row.iter_mut().zip(xm.row(j)) {
                        *o += we * s;
                    }
                }
            });
        }
        self.push(out, Op::SpmmEdges { mask, w, x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "mul_elem shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::MulElem(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1, "broadcast row must be 1×d");
        assert_eq!(va.cols, vr.cols, "broadcast width mismatch");
        let mut v = va.clone();
        for r in 0..v.rows {
            for (o, &x) in v.row_mut(r).iter_mut().zip(&vr.data) {
                *o += x;
            }
        }
        self.push(v, Op::AddRow { a, row })
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols, vb.cols, "concat_rows width mismatch");
        let mut data = Vec::with_capacity(va.data.len() + vb.data.len());
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        let v = Mat::from_vec(va.rows + vb.rows, va.cols, data);
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows, vb.rows, "concat_cols height mismatch");
        let mut data = Vec::with_capacity(va.data.len() + vb.data.len());
        for r in 0..va.rows {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let v = Mat::from_vec(va.rows, va.cols + vb.cols, data);
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.rows, "slice_rows out of range");
        let v = Mat::from_vec(
            len,
            va.cols,
            va.data[start * va.cols..(start + len) * va.cols].to_vec(),
        );
        self.push(v, Op::SliceRows { a, start, len })
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let va = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * va.cols);
        for &i in idx.iter() {
            assert!(i < va.rows, "gather index {i} out of {} rows", va.rows);
            data.extend_from_slice(va.row(i));
        }
        let v = Mat::from_vec(idx.len(), va.cols, data);
        self.push(v, Op::GatherRows { a, idx })
    }

    pub fn mean_pool_rows(&mut self, a: NodeId, groups: Arc<SparseBinaryMatrix>) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows, groups.n_cols, "pool members must index feature rows");
        let cols = va.cols;
        let mut out = Mat::zeros(groups.n_rows, cols);
        let threshold = par::row_threshold(groups.nnz() * cols);
        par::for_each_row(&mut out.data, cols.max(1), threshold, |g, row| {
            let members = groups.row(g);
            if members.is_empty() {
                return;
            }
            for &m in members {
                for (o, &s) in row.iter_mut().zip(va.row(m)) {
                    *o += s;
                }
            }
            let inv = 1.0 / members.len() as f64;
            for o in row.iter_mut() {
                *o *= inv;
            }
        });
        self.push(out, Op::MeanPoolRows { a, groups })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn leaky(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push(v, Op::Leaky { a, slope })
    }

    pub fn row_normalize(&mut self, a: NodeId, clamp: f64) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for r in 0..v.rows {
            let norm = va.row(r).iter().map(|&x| x * x).sum::<f64>().sqrt();
            let denom = norm.max(clamp);
            for o in v.row_mut(r) {
                *o /= denom;
            }
        }
        self.push(v, Op::RowNormalize { a, clamp })
    }

    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId, clamp: f64) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "cosine_rows shape mismatch");
        let mut data = Vec::with_capacity(va.rows);
        for r in 0..va.rows {
            let (ra, rb) = (va.row(r), vb.row(r));
            let dot: f64 = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            let na = ra.iter().map(|&x| x * x).sum::<f64>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<f64>().sqrt();
            data.push(dot / (na * nb).max(clamp));
        }
        let v = Mat::from_vec(va.rows, 1, data);
        self.push(v, Op::CosineRows { a, b, clamp })
    }

    pub fn masked_softmax(&mut self, scores: NodeId, mask: Arc<EdgeMask>, eps: f64) -> NodeId {
        let s = self.value(scores);
        assert_eq!(s.rows, mask.n_edges(), "score count != mask edges");
        assert_eq!(s.cols, 1, "scores must be a column");
        let mut out = vec![0.0; s.rows];
        for i in 0..mask.csr.n_rows {
            let lo = mask.csr.row_offsets[i];
            let hi = mask.csr.row_offsets[i + 1];
            if lo == hi {
                continue;
            }
            let m = s.data[lo..hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for e in lo..hi {
                let x = (s.data[e] - m).exp();
                out[e] = x;
                denom += x;
            }
            let denom = denom.max(eps * (-m).exp());
            for o in &mut out[lo..hi] {
                *o /= denom;
            }
        }
        let v = Mat::from_vec(s.rows, 1, out);
        self.push(v, Op::MaskedSoftmax { scores, mask })
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "row_dot shape mismatch");
        let data = (0..va.rows)
            .map(|r| va.row(r).iter().zip(vb.row(r)).map(|(&x, &y)| x * y).sum())
            .collect();
        let v = Mat::from_vec(va.rows, 1, data);
        self.push(v, Op::RowDot(a, b))
    }

    pub fn take_diag(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows, va.cols, "take_diag expects square");
        let data = (0..va.rows).map(|r| va.get(r, r)).collect();
        let v = Mat::from_vec(va.rows, 1, data);
        self.push(v, Op::TakeDiag(a))
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = (0..va.rows)
            .map(|r| {
                let row = va.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let v = Mat::from_vec(va.rows, 1, data);
        self.push(v, Op::LogSumExpRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Mat::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert!(va.numel() > 0, "mean of empty tensor");
        let v = Mat::scalar(va.sum() / va.numel() as f64);
        self.push(v, Op::MeanAll(a))
    }

    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        let v = Mat::scalar(self.value(a).sq_norm());
        self.push(v, Op::SqNorm(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(stable_softplus);
        self.push(v, Op::Softplus(a))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns per-node gradients; leaf
    /// gradients are collected by the caller (see `ParameterSet::absorb`).
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward requires a scalar loss node"
        );
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { by_node: grads }
    }

    fn add_grad(&self, grads: &mut [Option<Mat>], id: NodeId, delta: Mat) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_parents(&self, id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.add_grad(grads, *a, g.matmul_nt(vb));
                }
                if self.nodes[b.0].needs_grad {
                    self.add_grad(grads, *b, va.matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.add_grad(grads, *a, g.matmul(vb));
                }
                if self.nodes[b.0].needs_grad {
                    self.add_grad(grads, *b, g.matmul_tn(va));
                }
            }
            Op::Spmv { adj, x } => {
                if self.nodes[x.0].needs_grad {
                    self.add_grad(grads, *x, spmv_block_transpose(adj, g));
                }
            }
            Op::SpmmEdges { mask, w, x } => {
                let (vw, vx) = (self.value(*w), self.value(*x));
                if self.nodes[w.0].needs_grad {
                    let mut gw = Mat::zeros(mask.n_edges(), 1);
                    let cols = vx.cols;
                    let threshold = par::row_threshold(mask.n_edges() * cols);
                    par::for_each_index(&mut gw.data, threshold, |e| {
                        let i = mask.dst_of_edge[e];
                        let j = mask.src_of_edge[e];
                        g.data[i * cols..(i + 1) * cols]
                            .iter()
                            .zip(vx.row(j))
                            .map(|(&gg, &xx)| gg * xx)
                            .sum()
                    });
                    self.add_grad(grads, *w, gw);
                }
                if self.nodes[x.0].needs_grad {
                    // gx = Aᵀ·g over the transpose index lists
                    let cols = vx.cols;
                    let mut gx = Mat::zeros(vx.rows, cols);
                    let threshold = par::row_threshold(mask.n_edges() * cols);
                    par::for_each_row(&mut gx.data, cols.max(1), threshold, |j, row| {
                        for k in mask.t_offsets[j]..mask.t_offsets[j + 1] {
                            let i = mask.t_cols[k];
                            let e = mask.t_edge_id[k];
                            let we = vw.data[e];
                            for (o, &gg) in row.iter_mut().zip(g.row(i)) {
                                *o += we * gg;
                            }
                        }
                    });
                    self.add_grad(grads, *x, gx);
                }
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.scale(-1.0));
            }
            Op::Scale(a, c) => {
                self.add_grad(grads, *a, g.scale(*c));
            }
            Op::MulElem(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let data = g.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
                    self.add_grad(grads, *a, Mat::from_vec(g.rows, g.cols, data));
                }
                if self.nodes[b.0].needs_grad {
                    let data = g.data.iter().zip(&va.data).map(|(&x, &y)| x * y).collect();
                    self.add_grad(grads, *b, Mat::from_vec(g.rows, g.cols, data));
                }
            }
            Op::AddRow { a, row } => {
                if self.nodes[a.0].needs_grad {
                    self.add_grad(grads, *a, g.clone());
                }
                if self.nodes[row.0].needs_grad {
                    let mut gr = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, &x) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.add_grad(grads, *row, gr);
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows;
                let cols = g.cols;
                if self.nodes[a.0].needs_grad {
                    let ga = Mat::from_vec(ra, cols, g.data[..ra * cols].to_vec());
                    self.add_grad(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let rb = g.rows - ra;
                    let gb = Mat::from_vec(rb, cols, g.data[ra * cols..].to_vec());
                    self.add_grad(grads, *b, gb);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols;
                let cb = g.cols - ca;
                if self.nodes[a.0].needs_grad {
                    let mut ga = Mat::zeros(g.rows, ca);
                    for r in 0..g.rows {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    }
                    self.add_grad(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = Mat::zeros(g.rows, cb);
                    for r in 0..g.rows {
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    self.add_grad(grads, *b, gb);
                }
            }
            Op::SliceRows { a, start, len } => {
                let va = self.value(*a);
                let mut ga = Mat::zeros(va.rows, va.cols);
                ga.data[start * va.cols..(start + len) * va.cols].copy_from_slice(&g.data);
                self.add_grad(grads, *a, ga);
            }
            Op::GatherRows { a, idx } => {
                let va = self.value(*a);
                let mut ga = Mat::zeros(va.rows, va.cols);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::MeanPoolRows { a, groups } => {
                let va = self.value(*a);
                let mut ga = Mat::zeros(va.rows, va.cols);
                for gi in 0..groups.n_rows {
                    let members = groups.row(gi);
                    if members.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / members.len() as f64;
                    for &m in members {
                        for (o, &x) in ga.row_mut(m).iter_mut().zip(g.row(gi)) {
                            *o += inv * x;
                        }
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::Exp(a) => {
                let vy = self.value(NodeId(id));
                let data = g.data.iter().zip(&vy.data).map(|(&x, &y)| x * y).collect();
                self.add_grad(grads, *a, Mat::from_vec(g.rows, g.cols, data));
            }
            Op::Leaky { a, slope } => {
                let va = self.value(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&va.data)
                    .map(|(&gg, &x)| if x >= 0.0 { gg } else { slope * gg })
                    .collect();
                self.add_grad(grads, *a, Mat::from_vec(g.rows, g.cols, data));
            }
            Op::RowNormalize { a, clamp } => {
                let va = self.value(*a);
                let vy = self.value(NodeId(id));
                let mut ga = Mat::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    let norm = va.row(r).iter().map(|&x| x * x).sum::<f64>().sqrt();
                    let gr = g.row(r);
                    let out = ga.row_mut(r);
                    if norm > *clamp {
                        let y = vy.row(r);
                        let dot: f64 = gr.iter().zip(y).map(|(&gg, &yy)| gg * yy).sum();
                        for ((o, &gg), &yy) in out.iter_mut().zip(gr).zip(y) {
                            *o = (gg - yy * dot) / norm;
                        }
                    } else {
                        for (o, &gg) in out.iter_mut().zip(gr) {
                            *o = gg / clamp;
                        }
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::CosineRows { a, b, clamp } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = Mat::zeros(va.rows, va.cols);
                let mut gb = Mat::zeros(vb.rows, vb.cols);
                for r in 0..va.rows {
                    let (ra, rb) = (va.row(r), vb.row(r));
                    let dot: f64 = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
                    let na = ra.iter().map(|&x| x * x).sum::<f64>().sqrt();
                    let nb = rb.iter().map(|&x| x * x).sum::<f64>().sqrt();
                    let gg = g.data[r];
                    let prod = na * nb;
                    if prod > *clamp {
                        let y = dot / prod;
                        for ((o, &xa), &xb) in ga.row_mut(r).iter_mut().zip(ra).zip(rb) {
                            *o = gg * (xb / prod - y * xa / (na * na));
                        }
                        for ((o, &xb), &xa) in gb.row_mut(r).iter_mut().zip(rb).zip(ra) {
                            *o = gg * (xa / prod - y * xb / (nb * nb));
                        }
                    } else {
                        for (o, &xb) in ga.row_mut(r).iter_mut().zip(rb) {
                            *o = gg * xb / clamp;
                        }
                        for (o, &xa) in gb.row_mut(r).iter_mut().zip(ra) {
                            *o = gg * xa / clamp;
                        }
                    }
                }
                if self.nodes[a.0].needs_grad {
                    self.add_grad(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    self.add_grad(grads, *b, gb);
                }
            }
            Op::MaskedSoftmax { scores, mask } => {
                let vy = self.value(NodeId(id));
                let mut gs = Mat::zeros(vy.rows, 1);
                for i in 0..mask.csr.n_rows {
                    let lo = mask.csr.row_offsets[i];
                    let hi = mask.csr.row_offsets[i + 1];
                    if lo == hi {
                        continue;
                    }
                    let weighted: f64 = (lo..hi).map(|e| g.data[e] * vy.data[e]).sum();
                    for e in lo..hi {
                        gs.data[e] = vy.data[e] * (g.data[e] - weighted);
                    }
                }
                self.add_grad(grads, *scores, gs);
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let mut ga = Mat::zeros(va.rows, va.cols);
                    for r in 0..va.rows {
                        let gg = g.data[r];
                        for (o, &x) in ga.row_mut(r).iter_mut().zip(vb.row(r)) {
                            *o = gg * x;
                        }
                    }
                    self.add_grad(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = Mat::zeros(vb.rows, vb.cols);
                    for r in 0..vb.rows {
                        let gg = g.data[r];
                        for (o, &x) in gb.row_mut(r).iter_mut().zip(va.row(r)) {
                            *o = gg * x;
                        }
                    }
                    self.add_grad(grads, *b, gb);
                }
            }
            Op::TakeDiag(a) => {
                let va = self.value(*a);
                let mut ga = Mat::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    ga.set(r, r, g.data[r]);
                }
                self.add_grad(grads, *a, ga);
            }
            Op::LogSumExpRows(a) => {
                let va = self.value(*a);
                let vy = self.value(NodeId(id));
                let mut ga = Mat::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    let gg = g.data[r];
                    let y = vy.data[r];
                    for (o, &x) in ga.row_mut(r).iter_mut().zip(va.row(r)) {
                        *o = gg * (x - y).exp();
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let va = self.value(*a);
                let gg = g.data[0];
                self.add_grad(grads, *a, Mat::from_vec(va.rows, va.cols, vec![gg; va.numel()]));
            }
            Op::MeanAll(a) => {
                let va = self.value(*a);
                let gg = g.data[0] / va.numel() as f64;
                self.add_grad(grads, *a, Mat::from_vec(va.rows, va.cols, vec![gg; va.numel()]));
            }
            Op::SqNorm(a) => {
                let va = self.value(*a);
                let gg = g.data[0];
                let data = va.data.iter().map(|&x| 2.0 * gg * x).collect();
                self.add_grad(grads, *a, Mat::from_vec(va.rows, va.cols, data));
            }
            Op::Softplus(a) => {
                let va = self.value(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&va.data)
                    .map(|(&gg, &x)| gg * sigmoid(x))
                    .collect();
                self.add_grad(grads, *a, Mat::from_vec(g.rows, g.cols, data));
            }
        }
    }
}

/// ln(1 + eˣ) without overflow.
pub fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
