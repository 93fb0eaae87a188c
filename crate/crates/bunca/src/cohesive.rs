//! Cohesive view: embedding propagation over the unified user–bundle graph.
//!
//! Pure LightGCN-style smoothing — no self-connections, no nonlinearity,
//! layers aggregated by unweighted sum including layer 0.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::sparse::UnifiedGraph;

pub const MAX_LAYERS: usize = 8;

#[derive(Debug, Clone, Copy)]
pub struct CohesiveConfig {
    /// Propagation depth H.
    pub layers: usize,
}

impl CohesiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers > MAX_LAYERS {
            return Err(Error::Config(format!(
                "cohesive depth {} exceeds maximum {MAX_LAYERS}",
                self.layers
            )));
        }
        Ok(())
    }
}

/// Stack [users; bundles] and propagate `layers` hops. Returns all layer
/// nodes, layer 0 first.
pub fn propagate_unified(
    tape: &mut Tape,
    user_embed: NodeId,
    bundle_embed: NodeId,
    graph: &UnifiedGraph,
    layers: usize,
) -> Result<Vec<NodeId>> {
    let nu = tape.value(user_embed).rows;
    let nb = tape.value(bundle_embed).rows;
    if nu != graph.n_users || nb != graph.n_bundles {
        return Err(Error::dimension(
            "propagate_unified",
            format!("{} users + {} bundles", graph.n_users, graph.n_bundles),
            format!("{nu} users + {nb} bundles"),
        ));
    }
    let mut out = Vec::with_capacity(layers + 1);
    out.push(tape.concat_rows(user_embed, bundle_embed));
    for _ in 0..layers {
        let prev = *out.last().expect("nonempty");
        out.push(tape.spmv(graph.adj.clone(), prev));
    }
    Ok(out)
}

/// Elementwise sum over a nonempty layer list.
pub fn sum_layers(tape: &mut Tape, layers: &[NodeId]) -> NodeId {
    assert!(!layers.is_empty(), "layer list must be nonempty");
    let mut acc = layers[0];
    for &l in &layers[1..] {
        acc = tape.add(acc, l);
    }
    acc
}

/// Sum all layers and split back into the user and bundle blocks.
pub fn aggregate_layers(
    tape: &mut Tape,
    layers: &[NodeId],
    n_users: usize,
    n_bundles: usize,
) -> (NodeId, NodeId) {
    let total = sum_layers(tape, layers);
    let users = tape.slice_rows(total, 0, n_users);
    let bundles = tape.slice_rows(total, n_users, n_bundles);
    (users, bundles)
}
