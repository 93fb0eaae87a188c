//! Sparse interaction matrices and normalized propagation graphs.
//!
//! Everything here is compressed sparse row with per-row sorted, deduplicated
//! columns. Graphs are immutable after construction; [`spmv_block`] is the
//! one hot kernel and parallelizes over output rows.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Mat;

/// Row-indexed sparse 0/1 incidence matrix. Values are implicitly 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseBinaryMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
}

impl SparseBinaryMatrix {
    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        SparseBinaryMatrix {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
        }
    }

    /// Build from (row, col) pairs. Pairs are sorted and deduplicated;
    /// out-of-range indices panic (construction-time programming error).
    pub fn from_pairs(n_rows: usize, n_cols: usize, pairs: &[(usize, usize)]) -> Self {
        let mut sorted: Vec<(usize, usize)> = pairs.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut row_offsets = vec![0usize; n_rows + 1];
        let mut col_indices = Vec::with_capacity(sorted.len());
        for &(r, c) in &sorted {
            assert!(r < n_rows && c < n_cols, "entry ({r},{c}) out of {n_rows}x{n_cols}");
            row_offsets[r + 1] += 1;
            col_indices.push(c);
        }
        for r in 0..n_rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        SparseBinaryMatrix {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
        }
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    /// Column indices stored in `row`.
    pub fn row(&self, row: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[row]..self.row_offsets[row + 1]]
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.row(row).binary_search(&col).is_ok()
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_rows).flat_map(move |r| self.row(r).iter().map(move |&c| (r, c)))
    }

    /// Per-row entry counts.
    pub fn row_degrees(&self) -> Vec<usize> {
        (0..self.n_rows).map(|r| self.row(r).len()).collect()
    }
}

/// Sparse matrix of non-negative integer counts, same layout as
/// [`SparseBinaryMatrix`] plus a count per stored entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub counts: Vec<u32>,
}

impl CountMatrix {
    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        let lo = self.row_offsets[row];
        let hi = self.row_offsets[row + 1];
        match self.col_indices[lo..hi].binary_search(&col) {
            Ok(pos) => self.counts[lo + pos],
            Err(_) => 0,
        }
    }
}

/// Which product [`cooccurrence`] forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CooccurrenceSide {
    /// M·Mᵀ — shared-column counts between rows.
    Rows,
    /// Mᵀ·M — shared-row counts between columns.
    Cols,
}

/// Weighted sparse adjacency with symmetric-degree edge weights
/// 1/√(deg(v)·deg(v')).
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    pub n: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub symmetric: bool,
}

impl NormalizedAdjacency {
    /// Build from an undirected edge list (each pair listed once, u != v).
    /// Degrees are neighbor counts in this edge set.
    fn from_undirected_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut directed: Vec<(usize, usize)> = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            assert!(u < n && v < n, "edge ({u},{v}) out of bounds for {n} nodes");
            assert_ne!(u, v, "self-loop ({u},{u}) not allowed");
            directed.push((u, v));
            directed.push((v, u));
        }
        directed.sort_unstable();
        directed.dedup();

        let mut degrees = vec![0usize; n];
        for &(u, _) in &directed {
            degrees[u] += 1;
        }

        let mut row_offsets = vec![0usize; n + 1];
        let mut col_indices = Vec::with_capacity(directed.len());
        let mut weights = Vec::with_capacity(directed.len());
        for &(u, v) in &directed {
            row_offsets[u + 1] += 1;
            col_indices.push(v);
            weights.push(1.0 / ((degrees[u] as f64).sqrt() * (degrees[v] as f64).sqrt()));
        }
        for r in 0..n {
            row_offsets[r + 1] += row_offsets[r];
        }
        NormalizedAdjacency {
            n,
            row_offsets,
            col_indices,
            weights,
            symmetric: true,
        }
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn neighbors(&self, v: usize) -> (&[usize], &[f64]) {
        let lo = self.row_offsets[v];
        let hi = self.row_offsets[v + 1];
        (&self.col_indices[lo..hi], &self.weights[lo..hi])
    }

    /// First-hop neighbor count of `v`.
    pub fn degree(&self, v: usize) -> usize {
        self.row_offsets[v + 1] - self.row_offsets[v]
    }
}

/// Unified user–bundle graph: users occupy node ids [0, n_users),
/// bundles occupy [n_users, n_users + n_bundles).
#[derive(Debug, Clone)]
pub struct UnifiedGraph {
    pub adj: Arc<NormalizedAdjacency>,
    pub n_users: usize,
    pub n_bundles: usize,
}

/// Swap rows and columns.
pub fn transpose(m: &SparseBinaryMatrix) -> SparseBinaryMatrix {
    let pairs: Vec<(usize, usize)> = m.iter_entries().map(|(r, c)| (c, r)).collect();
    SparseBinaryMatrix::from_pairs(m.n_cols, m.n_rows, &pairs)
}

/// Co-occurrence counts: entry (i, j) is the number of shared neighbors
/// between entities i and j on the chosen side.
pub fn cooccurrence(m: &SparseBinaryMatrix, side: CooccurrenceSide) -> CountMatrix {
    let base = match side {
        CooccurrenceSide::Rows => m.clone(),
        CooccurrenceSide::Cols => transpose(m),
    };
    // base · baseᵀ via a transpose index and a dense scratch row.
    let t = transpose(&base);
    let n = base.n_rows;
    let mut scratch: Vec<u32> = vec![0; n];
    let mut touched: Vec<usize> = Vec::new();

    let mut row_offsets = vec![0usize; n + 1];
    let mut col_indices = Vec::new();
    let mut counts = Vec::new();
    for i in 0..n {
        for &c in base.row(i) {
            for &j in t.row(c) {
                if scratch[j] == 0 {
                    touched.push(j);
                }
                scratch[j] += 1;
            }
        }
        touched.sort_unstable();
        for &j in &touched {
            col_indices.push(j);
            counts.push(scratch[j]);
            scratch[j] = 0;
        }
        row_offsets[i + 1] = row_offsets[i] + touched.len();
        touched.clear();
    }
    CountMatrix {
        n_rows: n,
        n_cols: n,
        row_offsets,
        col_indices,
        counts,
    }
}

/// Keep entries with count >= threshold, dropping the diagonal.
pub fn binarize(c: &CountMatrix, threshold: u32) -> SparseBinaryMatrix {
    assert_eq!(c.n_rows, c.n_cols, "binarize expects a square count matrix");
    assert!(threshold >= 1, "threshold must be >= 1");
    let mut pairs = Vec::new();
    for i in 0..c.n_rows {
        let lo = c.row_offsets[i];
        let hi = c.row_offsets[i + 1];
        for k in lo..hi {
            let j = c.col_indices[k];
            if i != j && c.counts[k] >= threshold {
                pairs.push((i, j));
            }
        }
    }
    SparseBinaryMatrix::from_pairs(c.n_rows, c.n_cols, &pairs)
}

/// Undirected bipartite graph on n_rows + n_cols nodes; row entities first.
/// Edge weight is 1/√(deg_left·deg_right); isolated nodes get no edges.
pub fn build_bipartite_adjacency(m: &SparseBinaryMatrix) -> NormalizedAdjacency {
    let n = m.n_rows + m.n_cols;
    let edges: Vec<(usize, usize)> = m
        .iter_entries()
        .map(|(r, c)| (r, m.n_rows + c))
        .collect();
    NormalizedAdjacency::from_undirected_edges(n, &edges)
}

/// Unified graph over users and bundles: user-bundle interactions plus
/// user-user and bundle-bundle co-occurrence links, with degrees counted
/// over the combined edge set.
pub fn build_unified_graph(
    x: &SparseBinaryMatrix,
    cu: &SparseBinaryMatrix,
    cb: &SparseBinaryMatrix,
) -> Result<UnifiedGraph> {
    if cu.n_rows != x.n_rows || cu.n_cols != x.n_rows {
        return Err(Error::dimension(
            "unified graph user links",
            format!("{}x{}", x.n_rows, x.n_rows),
            format!("{}x{}", cu.n_rows, cu.n_cols),
        ));
    }
    if cb.n_rows != x.n_cols || cb.n_cols != x.n_cols {
        return Err(Error::dimension(
            "unified graph bundle links",
            format!("{}x{}", x.n_cols, x.n_cols),
            format!("{}x{}", cb.n_rows, cb.n_cols),
        ));
    }
    for (i, j) in cu.iter_entries() {
        if i == j {
            return Err(Error::Data(format!("user link matrix has diagonal entry ({i},{i})")));
        }
    }
    for (i, j) in cb.iter_entries() {
        if i == j {
            return Err(Error::Data(format!("bundle link matrix has diagonal entry ({i},{i})")));
        }
    }
    let nu = x.n_rows;
    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(x.nnz() + cu.nnz() + cb.nnz());
    for (u, b) in x.iter_entries() {
        edges.push((u, nu + b));
    }
    for (u, v) in cu.iter_entries() {
        if u < v {
            edges.push((u, v));
        }
    }
    for (b, c) in cb.iter_entries() {
        if b < c {
            edges.push((nu + b, nu + c));
        }
    }
    Ok(UnifiedGraph {
        adj: Arc::new(NormalizedAdjacency::from_undirected_edges(nu + x.n_cols, &edges)),
        n_users: nu,
        n_bundles: x.n_cols,
    })
}

fn spmv_row(adj: &NormalizedAdjacency, features: &Mat, v: usize, out_row: &mut [f64]) {
    let (cols, ws) = adj.neighbors(v);
    for (&c, &w) in cols.iter().zip(ws) {
        let src = features.row(c);
        for (o, &s) in out_row.iter_mut().zip(src) {
            *o += w * s;
        }
    }
}

/// One propagation step: output row v = Σ_{v'∈N(v)} w(v,v')·features[v'].
/// No self-term, no nonlinearity. Parallelizes over output rows.
pub fn spmv_block(adj: &NormalizedAdjacency, features: &Mat) -> Mat {
    assert_eq!(
        features.rows, adj.n,
        "feature rows {} != node count {}",
        features.rows, adj.n
    );
    let mut out = Mat::zeros(adj.n, features.cols);
    let cols = features.cols;
    let threshold = par::row_threshold(adj.nnz() * cols);
    par::for_each_row(&mut out.data, cols, threshold, |v, row| {
        spmv_row(adj, features, v, row);
    });
    out
}

/// Sequential reference for [`spmv_block`]; kept public for oracle tests
/// and the bench suite. Bitwise-identical to the parallel path.
pub fn spmv_block_seq(adj: &NormalizedAdjacency, features: &Mat) -> Mat {
    assert_eq!(features.rows, adj.n);
    let mut out = Mat::zeros(adj.n, features.cols);
    let cols = features.cols;
    for v in 0..adj.n {
        spmv_row(adj, features, v, &mut out.data[v * cols..(v + 1) * cols]);
    }
    out
}

/// Apply the transpose of `adj` to `features`. For symmetric graphs this is
/// the same as [`spmv_block`]; otherwise falls back to a sequential scatter.
pub fn spmv_block_transpose(adj: &NormalizedAdjacency, features: &Mat) -> Mat {
    if adj.symmetric {
        return spmv_block(adj, features);
    }
    assert_eq!(features.rows, adj.n);
    let cols = features.cols;
    let mut out = Mat::zeros(adj.n, cols);
    for v in 0..adj.n {
        let (nbrs, ws) = adj.neighbors(v);
        let src = features.row(v);
        for (&c, &w) in nbrs.iter().zip(ws) {
            let dst = &mut out.data[c * cols..(c + 1) * cols];
            for (o, &s) in dst.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
    out
}

/// A sparse support for per-edge attention: the mask in CSR order plus the
/// flattened edge endpoints and a transpose permutation, so both A·X and
/// Aᵀ·G run over fixed index lists.
#[derive(Debug, Clone)]
pub struct EdgeMask {
    pub csr: SparseBinaryMatrix,
    /// Row (destination) of each edge, in CSR order.
    pub dst_of_edge: Arc<Vec<usize>>,
    /// Column (source) of each edge, in CSR order — same as `csr.col_indices`.
    pub src_of_edge: Arc<Vec<usize>>,
    /// CSR of the transpose; `t_edge_id[k]` maps its k-th slot back to the
    /// original edge id.
    pub t_offsets: Vec<usize>,
    pub t_cols: Vec<usize>,
    pub t_edge_id: Vec<usize>,
}

impl EdgeMask {
    pub fn new(csr: SparseBinaryMatrix) -> Arc<Self> {
        assert_eq!(csr.n_rows, csr.n_cols, "edge mask must be square");
        let nnz = csr.nnz();
        let mut dst_of_edge = Vec::with_capacity(nnz);
        for r in 0..csr.n_rows {
            for _ in csr.row(r) {
                dst_of_edge.push(r);
            }
        }
        // transpose order: (col, row, edge_id)
        let mut trip: Vec<(usize, usize, usize)> = csr
            .col_indices
            .iter()
            .enumerate()
            .map(|(e, &c)| (c, dst_of_edge[e], e))
            .collect();
        trip.sort_unstable();
        let mut t_offsets = vec![0usize; csr.n_rows + 1];
        let mut t_cols = Vec::with_capacity(nnz);
        let mut t_edge_id = Vec::with_capacity(nnz);
        for &(c, r, e) in &trip {
            t_offsets[c + 1] += 1;
            t_cols.push(r);
            t_edge_id.push(e);
        }
        for i in 0..csr.n_rows {
            t_offsets[i + 1] += t_offsets[i];
        }
        let src_of_edge = csr.col_indices.clone();
        Arc::new(EdgeMask {
            csr,
            dst_of_edge: Arc::new(dst_of_edge),
            src_of_edge: Arc::new(src_of_edge),
            t_offsets,
            t_cols,
            t_edge_id,
        })
    }

    pub fn n_items(&self) -> usize {
        self.csr.n_rows
    }

    pub fn n_edges(&self) -> usize {
        self.csr.nnz()
    }
}
