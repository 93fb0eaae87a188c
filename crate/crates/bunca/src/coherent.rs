//! Coherent view: multi-prospect causation attention over item co-occurrence,
//! item enhancement, the user-preference and bundle-construction sub-views,
//! and their fusion.
//!
//! Each prospect scores every masked item pair (j → i) with its own source
//! and destination projections, row-softmax turns scores into an asymmetric
//! causation matrix on the mask support, and enhanced items mix the
//! causation-weighted neighborhood with the original embedding.

use std::sync::Arc;

use crate::autodiff::{NodeId, Tape};
use crate::cohesive::sum_layers;
use crate::error::{Error, Result};
use crate::sparse::{EdgeMask, NormalizedAdjacency, SparseBinaryMatrix};

/// Negative slope of the attention activation.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Denominator floor in the causation softmax.
pub const CAUSATION_EPS: f64 = 1e-8;

/// Shape-level description of one causation network.
#[derive(Debug, Clone, Copy)]
pub struct MpcConfig {
    /// Number of prospects L.
    pub prospects: usize,
    /// Residual mix α ∈ [0,1]: 0 keeps items unchanged, 1 replaces them.
    pub alpha: f64,
    /// Denominator floor for the masked softmax.
    pub eps: f64,
    /// Negative slope of the score activation.
    pub leaky_slope: f64,
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prospects == 0 {
            return Err(Error::Config("prospect count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Tape nodes for one causation network's parameters.
/// `src_weight[l]`/`dst_weight[l]` are the d×d projections, `prospect[l]`
/// the d×1 scoring vector, `bias` the shared 1×d offset.
#[derive(Debug, Clone)]
pub struct MpcNodes {
    pub prospect: Vec<NodeId>,
    pub src_weight: Vec<NodeId>,
    pub dst_weight: Vec<NodeId>,
    pub bias: NodeId,
}

/// Per-prospect edge scores plus the source projections they were built
/// from. The projections are reused verbatim by [`enhance_items`] so the
/// source weight matrix is one parameter with two uses.
pub struct ProspectScores {
    /// E×1 score columns, one per prospect, in mask CSR edge order.
    pub scores: Vec<NodeId>,
    /// n_items×d projected items, one per prospect.
    pub src_projections: Vec<NodeId>,
}

/// Score every masked edge (i, j): influence of source item j on
/// destination item i under each prospect.
pub fn prospect_scores(
    tape: &mut Tape,
    items: NodeId,
    mpc: &MpcNodes,
    mask: &Arc<EdgeMask>,
    leaky_slope: f64,
) -> Result<ProspectScores> {
    let d = tape.value(items).cols;
    for (name, node) in [("src", mpc.src_weight[0]), ("dst", mpc.dst_weight[0])] {
        let w = tape.value(node);
        if w.rows != d || w.cols != d {
            return Err(Error::dimension(
                format!("prospect {name} projection"),
                format!("{d}x{d}"),
                format!("{}x{}", w.rows, w.cols),
            ));
        }
    }
    if tape.value(items).rows != mask.n_items() {
        return Err(Error::dimension(
            "prospect_scores items",
            mask.n_items(),
            tape.value(items).rows,
        ));
    }
    let mut scores = Vec::with_capacity(mpc.prospect.len());
    let mut src_projections = Vec::with_capacity(mpc.prospect.len());
    for l in 0..mpc.prospect.len() {
        let src_proj = tape.matmul(items, mpc.src_weight[l]);
        let dst_proj = tape.matmul(items, mpc.dst_weight[l]);
        let edge_src = tape.gather_rows(src_proj, mask.src_of_edge.clone());
        let edge_dst = tape.gather_rows(dst_proj, mask.dst_of_edge.clone());
        let summed = tape.add(edge_src, edge_dst);
        let shifted = tape.add_row(summed, mpc.bias);
        let activated = tape.leaky(shifted, leaky_slope);
        scores.push(tape.matmul(activated, mpc.prospect[l]));
        src_projections.push(src_proj);
    }
    Ok(ProspectScores {
        scores,
        src_projections,
    })
}

/// Row-normalize edge scores into a causation matrix on the mask support.
/// Rows with empty support are exactly zero.
pub fn causation_matrix(
    tape: &mut Tape,
    scores: NodeId,
    mask: &Arc<EdgeMask>,
    eps: f64,
) -> NodeId {
    tape.masked_softmax(scores, mask.clone(), eps)
}

/// Aggregate causation-weighted source projections per prospect, average
/// over prospects, and mix with the original items:
/// enhanced = α · mean_l(A_l · srcproj_l) + (1−α) · items.
pub fn enhance_items(
    tape: &mut Tape,
    items: NodeId,
    causation: &[NodeId],
    src_projections: &[NodeId],
    mask: &Arc<EdgeMask>,
    alpha: f64,
) -> NodeId {
    assert_eq!(causation.len(), src_projections.len());
    assert!(!causation.is_empty(), "at least one prospect required");
    let mut per_prospect = Vec::with_capacity(causation.len());
    for (&a, &proj) in causation.iter().zip(src_projections) {
        per_prospect.push(tape.spmm_edges(mask.clone(), a, proj));
    }
    let total = sum_layers(tape, &per_prospect);
    let averaged = tape.scale(total, 1.0 / causation.len() as f64);
    let mixed = tape.scale(averaged, alpha);
    let residual = tape.scale(items, 1.0 - alpha);
    tape.add(mixed, residual)
}

/// Final node blocks of one sub-view pass.
#[derive(Debug, Clone, Copy)]
pub struct SubViewNodes {
    pub users: NodeId,
    pub bundles: NodeId,
    pub items: NodeId,
}

/// User-preference sub-view: propagate [users; enhanced items] over the
/// user–item graph, then pool bundle rows as the mean of their items.
/// Bundles with no items get a zero row.
pub fn run_subview_up(
    tape: &mut Tape,
    user_embed: NodeId,
    enhanced_items: NodeId,
    user_item_graph: &Arc<NormalizedAdjacency>,
    bundle_items: &Arc<SparseBinaryMatrix>,
    layers: usize,
) -> Result<SubViewNodes> {
    let nu = tape.value(user_embed).rows;
    let ni = tape.value(enhanced_items).rows;
    if user_item_graph.n != nu + ni {
        return Err(Error::dimension("UP sub-view graph", nu + ni, user_item_graph.n));
    }
    if bundle_items.n_cols != ni {
        return Err(Error::dimension("UP bundle pooling", ni, bundle_items.n_cols));
    }
    let mut layer_nodes = vec![tape.concat_rows(user_embed, enhanced_items)];
    for _ in 0..layers {
        let prev = *layer_nodes.last().expect("nonempty");
        layer_nodes.push(tape.spmv(user_item_graph.clone(), prev));
    }
    let total = sum_layers(tape, &layer_nodes);
    let users = tape.slice_rows(total, 0, nu);
    let items = tape.slice_rows(total, nu, ni);
    let bundles = tape.mean_pool_rows(items, bundle_items.clone());
    Ok(SubViewNodes { users, bundles, items })
}

/// Bundle-construction sub-view: propagate [bundles; enhanced items] over
/// the bundle–item graph, then pool user rows as the mean of the items in
/// their interaction history. Users with no items get a zero row.
pub fn run_subview_bc(
    tape: &mut Tape,
    bundle_embed: NodeId,
    enhanced_items: NodeId,
    bundle_item_graph: &Arc<NormalizedAdjacency>,
    user_items: &Arc<SparseBinaryMatrix>,
    layers: usize,
) -> Result<SubViewNodes> {
    let nb = tape.value(bundle_embed).rows;
    let ni = tape.value(enhanced_items).rows;
    if bundle_item_graph.n != nb + ni {
        return Err(Error::dimension("BC sub-view graph", nb + ni, bundle_item_graph.n));
    }
    if user_items.n_cols != ni {
        return Err(Error::dimension("BC user pooling", ni, user_items.n_cols));
    }
    let mut layer_nodes = vec![tape.concat_rows(bundle_embed, enhanced_items)];
    for _ in 0..layers {
        let prev = *layer_nodes.last().expect("nonempty");
        layer_nodes.push(tape.spmv(bundle_item_graph.clone(), prev));
    }
    let total = sum_layers(tape, &layer_nodes);
    let bundles = tape.slice_rows(total, 0, nb);
    let items = tape.slice_rows(total, nb, ni);
    let users = tape.mean_pool_rows(items, user_items.clone());
    Ok(SubViewNodes { users, bundles, items })
}

/// β-weighted combination of the two sub-views:
/// coherent = β·BC + (1−β)·UP, for users and bundles alike.
pub fn fuse_coherent(
    tape: &mut Tape,
    up: &SubViewNodes,
    bc: &SubViewNodes,
    beta: f64,
) -> Result<(NodeId, NodeId)> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must be in [0,1], got {beta}")));
    }
    let bc_u = tape.scale(bc.users, beta);
    let up_u = tape.scale(up.users, 1.0 - beta);
    let users = tape.add(bc_u, up_u);
    let bc_b = tape.scale(bc.bundles, beta);
    let up_b = tape.scale(up.bundles, 1.0 - beta);
    let bundles = tape.add(bc_b, up_b);
    Ok((users, bundles))
}
