//! Loss functions and scoring: discrete/concrete contrastive terms, the
//! fused representation, inner-product scoring, pairwise ranking loss, and
//! the weighted total objective.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const COSINE_CLAMP: f64 = 1e-12;

fn check_tau(tau: f64) -> Result<()> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

/// Pairwise cosine similarity matrix between the rows of `a` and `b`.
fn cosine_matrix(tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    let na = tape.row_normalize(a, COSINE_CLAMP);
    let nb = tape.row_normalize(b, COSINE_CLAMP);
    tape.matmul_nt(na, nb)
}

/// Discrete contrastive loss: aligns each row of `first` with its matched
/// row of `second` against all in-batch rows. Mean over the batch of
/// −log( exp(cos(f_k, s_k)/τ) / Σ_k' exp(cos(f_k, s_k')/τ) ), the
/// denominator including k' = k.
pub fn discrete_contrastive(tape: &mut Tape, first: NodeId, second: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let n = tape.value(first).rows;
    assert!(n >= 1, "contrastive batch must be nonempty");
    let sims = cosine_matrix(tape, first, second);
    let scaled = tape.scale(sims, 1.0 / tau);
    let lse = tape.logsumexp_rows(scaled);
    let matched = tape.take_diag(scaled);
    let per_row = tape.sub(lse, matched);
    Ok(tape.mean_all(per_row))
}

/// Elementwise sum of the two view representations.
pub fn fuse_multiview(tape: &mut Tape, sv: NodeId, rv: NodeId) -> NodeId {
    tape.add(sv, rv)
}

/// Concrete contrastive loss over fused rows: self-discrimination with the
/// fixed numerator exp(1/τ). Mean over the batch of
/// −log( exp(1/τ) / Σ_k' exp(cos(c_k, c_k')/τ) ), self term included.
pub fn concrete_contrastive(tape: &mut Tape, fused: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let n = tape.value(fused).rows;
    assert!(n >= 1, "contrastive batch must be nonempty");
    let sims = cosine_matrix(tape, fused, fused);
    let scaled = tape.scale(sims, 1.0 / tau);
    let lse = tape.logsumexp_rows(scaled);
    let numerator = tape.constant(Mat::from_vec(n, 1, vec![1.0 / tau; n]));
    let per_row = tape.sub(lse, numerator);
    Ok(tape.mean_all(per_row))
}

/// γ-weighted combination of the averaged user/bundle contrastive losses.
pub fn combine_contrastive(
    tape: &mut Tape,
    discrete_user: NodeId,
    discrete_bundle: NodeId,
    concrete_user: NodeId,
    concrete_bundle: NodeId,
    gamma: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must be in [0,1], got {gamma}")));
    }
    let discrete = tape.add(discrete_user, discrete_bundle);
    let concrete = tape.add(concrete_user, concrete_bundle);
    let d = tape.scale(discrete, gamma * 0.5);
    let c = tape.scale(concrete, (1.0 - gamma) * 0.5);
    Ok(tape.add(d, c))
}

/// Final 2d representation: [μ·cohesive ∥ coherent].
pub fn final_repr(tape: &mut Tape, sv: NodeId, rv: NodeId, mu: f64) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Config(format!("mu must be in [0,1], got {mu}")));
    }
    let scaled = tape.scale(sv, mu);
    Ok(tape.concat_cols(scaled, rv))
}

/// Row-wise inner product of matched user/bundle representations.
pub fn score_rows(tape: &mut Tape, user_repr: NodeId, bundle_repr: NodeId) -> NodeId {
    tape.row_dot(user_repr, bundle_repr)
}

/// Pairwise ranking loss: mean over triples of −ln σ(pos − neg), computed
/// as softplus(neg − pos).
pub fn bpr_loss(tape: &mut Tape, pos_scores: NodeId, neg_scores: NodeId) -> NodeId {
    let margin = tape.sub(neg_scores, pos_scores);
    let per_triple = tape.softplus(margin);
    tape.mean_all(per_triple)
}

/// Squared L2 norm summed over a set of leaves.
pub fn l2_norm(tape: &mut Tape, leaves: &[NodeId]) -> NodeId {
    assert!(!leaves.is_empty(), "regularizer needs at least one tensor");
    let mut acc: Option<NodeId> = None;
    for &leaf in leaves {
        let n = tape.sq_norm(leaf);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, n),
            None => n,
        });
    }
    acc.expect("nonempty")
}

/// Total objective: ranking + λ1·contrastive + λ2·‖Θ‖².
pub fn total_loss(
    tape: &mut Tape,
    bpr: NodeId,
    contrastive: NodeId,
    regularizer: NodeId,
    lambda1: f64,
    lambda2: f64,
) -> Result<NodeId> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let cl = tape.scale(contrastive, lambda1);
    let reg = tape.scale(regularizer, lambda2);
    let partial = tape.add(bpr, cl);
    Ok(tape.add(partial, reg))
}
