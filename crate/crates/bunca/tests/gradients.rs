//! Central-difference verification of every tape primitive and of composed
//! forward paths, ending with the view pipelines and the loss functions.
//! The finite-difference side only ever calls the forward pass, so it stays
//! independent of the backward rules it certifies.

use std::sync::Arc;

use bunca::autodiff::{NodeId, Tape};
use bunca::coherent::{
    causation_matrix, enhance_items, fuse_coherent, prospect_scores, run_subview_bc,
    run_subview_up, MpcNodes,
};
use bunca::cohesive::{aggregate_layers, propagate_unified};
use bunca::data::toy_dataset;
use bunca::gradcheck::{gradcheck, GradCheckConfig};
use bunca::objective::{
    bpr_loss, combine_contrastive, concrete_contrastive, discrete_contrastive, final_repr,
    fuse_multiview, l2_norm, score_rows, total_loss,
};
use bunca::params::{xavier_init, ParameterSet};
use bunca::sparse::{
    build_bipartite_adjacency, build_unified_graph, cooccurrence, binarize, CooccurrenceSide,
    EdgeMask, SparseBinaryMatrix,
};
use bunca::train::TrainConfig;
use bunca::Mat;

/// Run gradcheck on a loss assembled by `build` from bound leaves.
fn check_with(params: ParameterSet, tol: f64, build: impl Fn(&mut Tape, &[Option<NodeId>]) -> NodeId + Sync) {
    let build = &build;
    let value_fn = |p: &ParameterSet| {
        let mut tape = Tape::new();
        let leaves = p.bind_leaves(&mut tape);
        let loss = build(&mut tape, &leaves);
        tape.scalar_value(loss)
    };
    let grad_fn = |p: &mut ParameterSet| {
        let mut tape = Tape::new();
        let leaves = p.bind_leaves(&mut tape);
        let loss = build(&mut tape, &leaves);
        let grads = tape.backward(loss);
        p.accumulate_grads(&tape, &grads);
        tape.scalar_value(loss)
    };
    let mut params = params;
    let cfg = GradCheckConfig {
        tol,
        ..GradCheckConfig::default()
    };
    let report = gradcheck(&mut params, value_fn, grad_fn, &cfg).expect("gradcheck ran");
    assert!(report.passed(), "{report}");
}

fn check(params: ParameterSet, build: impl Fn(&mut Tape, &[Option<NodeId>]) -> NodeId + Sync) {
    check_with(params, 1e-6, build);
}

fn two(seed: u64, shape_a: (usize, usize), shape_b: (usize, usize)) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.register("a", xavier_init(shape_a.0, shape_a.1, seed), true);
    p.register("b", xavier_init(shape_b.0, shape_b.1, seed + 1), true);
    p
}

fn one(seed: u64, rows: usize, cols: usize) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.register("a", xavier_init(rows, cols, seed), true);
    p
}

fn node(leaves: &[Option<NodeId>], i: usize) -> NodeId {
    leaves[i].expect("trainable leaf")
}

#[test]
fn grad_matmul() {
    for seed in [1, 2, 3] {
        check(two(seed, (5, 7), (7, 4)), |t, l| {
            let y = t.matmul(node(l, 0), node(l, 1));
            t.sq_norm(y)
        });
    }
}

#[test]
fn grad_matmul_nt() {
    check(two(11, (5, 7), (6, 7)), |t, l| {
        let y = t.matmul_nt(node(l, 0), node(l, 1));
        t.sq_norm(y)
    });
}

fn small_adjacency() -> Arc<bunca::sparse::NormalizedAdjacency> {
    let m = SparseBinaryMatrix::from_pairs(4, 5, &[(0, 0), (0, 3), (1, 1), (2, 0), (2, 4), (3, 2)]);
    Arc::new(build_bipartite_adjacency(&m))
}

#[test]
fn grad_spmv_flows_to_features() {
    let adj = small_adjacency();
    check(one(21, 9, 3), move |t, l| {
        let y = t.spmv(adj.clone(), node(l, 0));
        t.sq_norm(y)
    });
}

fn small_mask() -> Arc<EdgeMask> {
    EdgeMask::new(SparseBinaryMatrix::from_pairs(
        5,
        5,
        &[(0, 1), (0, 2), (1, 0), (2, 3), (2, 0), (2, 4), (4, 2)],
    ))
}

#[test]
fn grad_spmm_edges_both_operands() {
    let mask = small_mask();
    let mut p = ParameterSet::new();
    p.register("w", xavier_init(7, 1, 31), true);
    p.register("x", xavier_init(5, 3, 32), true);
    check(p, move |t, l| {
        let y = t.spmm_edges(mask.clone(), node(l, 0), node(l, 1));
        t.sq_norm(y)
    });
}

#[test]
fn grad_elementwise_ops() {
    check(two(41, (4, 4), (4, 4)), |t, l| {
        let s = t.add(node(l, 0), node(l, 1));
        let d = t.sub(s, node(l, 1));
        let m = t.mul_elem(d, node(l, 0));
        let sc = t.scale(m, -1.7);
        t.sum_all(sc)
    });
}

#[test]
fn grad_add_row_broadcast() {
    check(two(43, (6, 3), (1, 3)), |t, l| {
        let y = t.add_row(node(l, 0), node(l, 1));
        t.sq_norm(y)
    });
}

#[test]
fn grad_concat_and_slice() {
    check(two(47, (3, 4), (5, 4)), |t, l| {
        let y = t.concat_rows(node(l, 0), node(l, 1));
        let top = t.slice_rows(y, 1, 4);
        t.sq_norm(top)
    });
    check(two(48, (3, 4), (3, 2)), |t, l| {
        let y = t.concat_cols(node(l, 0), node(l, 1));
        t.sq_norm(y)
    });
}

#[test]
fn grad_gather_with_duplicates() {
    let idx = Arc::new(vec![0usize, 2, 2, 1, 0]);
    check(one(53, 4, 3), move |t, l| {
        let y = t.gather_rows(node(l, 0), idx.clone());
        t.sq_norm(y)
    });
}

#[test]
fn grad_mean_pool_with_empty_group() {
    let groups = Arc::new(SparseBinaryMatrix::from_pairs(3, 5, &[(0, 0), (0, 4), (2, 1), (2, 2), (2, 3)]));
    check(one(59, 5, 3), move |t, l| {
        let y = t.mean_pool_rows(node(l, 0), groups.clone());
        t.sq_norm(y)
    });
}

#[test]
fn grad_exp_and_leaky() {
    check(one(61, 4, 4), |t, l| {
        let e = t.exp(node(l, 0));
        t.sum_all(e)
    });
    check(one(62, 4, 4), |t, l| {
        let y = t.leaky(node(l, 0), 0.2);
        t.sq_norm(y)
    });
}

#[test]
fn grad_row_normalize() {
    check(one(67, 5, 4), |t, l| {
        let y = t.row_normalize(node(l, 0), 1e-12);
        let c = t.constant(Mat::from_fn(5, 4, |r, c| ((r * 4 + c) % 5) as f64 - 2.0));
        let m = t.mul_elem(y, c);
        t.sum_all(m)
    });
}

#[test]
fn grad_cosine_rows() {
    check(two(71, (6, 4), (6, 4)), |t, l| {
        let y = t.cosine_rows(node(l, 0), node(l, 1), 1e-12);
        t.sq_norm(y)
    });
}

#[test]
fn grad_masked_softmax() {
    let mask = small_mask();
    check(one(73, 7, 1), move |t, l| {
        let a = t.masked_softmax(node(l, 0), mask.clone(), 1e-8);
        let c = t.constant(Mat::from_fn(7, 1, |r, _| (r as f64) - 3.0));
        let m = t.mul_elem(a, c);
        t.sum_all(m)
    });
}

#[test]
fn grad_row_dot_diag_logsumexp() {
    check(two(79, (5, 3), (5, 3)), |t, l| {
        let y = t.row_dot(node(l, 0), node(l, 1));
        t.sq_norm(y)
    });
    check(one(80, 4, 4), |t, l| {
        let d = t.take_diag(node(l, 0));
        t.sq_norm(d)
    });
    check(one(81, 5, 6), |t, l| {
        let y = t.logsumexp_rows(node(l, 0));
        t.sum_all(y)
    });
}

#[test]
fn grad_reductions_and_softplus() {
    check(one(83, 4, 5), |t, l| t.mean_all(node(l, 0)));
    check(one(84, 4, 5), |t, l| t.sq_norm(node(l, 0)));
    check(one(85, 4, 5), |t, l| {
        let y = t.softplus(node(l, 0));
        t.sum_all(y)
    });
}

/// Randomized chains of shape-preserving primitives (up to 8 deep).
#[test]
fn grad_random_compositions() {
    for seed in 0..6u64 {
        let mut p = ParameterSet::new();
        p.register("a", xavier_init(5, 4, 100 + seed), true);
        p.register("b", xavier_init(5, 4, 200 + seed), true);
        check(p, move |t, l| {
            let mut pool = vec![node(l, 0), node(l, 1)];
            let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
            let mut next = move || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                state
            };
            for _ in 0..8 {
                let a = pool[(next() % pool.len() as u64) as usize];
                let b = pool[(next() % pool.len() as u64) as usize];
                let n = match next() % 6 {
                    0 => t.add(a, b),
                    1 => t.sub(a, b),
                    2 => t.mul_elem(a, b),
                    3 => t.scale(a, 0.7),
                    4 => t.leaky(a, 0.2),
                    _ => t.row_normalize(a, 1e-12),
                };
                pool.push(n);
            }
            let last = *pool.last().unwrap();
            t.sq_norm(last)
        });
    }
}

#[test]
fn grad_cohesive_propagation() {
    let x = SparseBinaryMatrix::from_pairs(4, 3, &[(0, 0), (1, 0), (1, 1), (2, 2), (3, 1)]);
    let cu = binarize(&cooccurrence(&x, CooccurrenceSide::Rows), 1);
    let cb = binarize(&cooccurrence(&x, CooccurrenceSide::Cols), 1);
    let graph = build_unified_graph(&x, &cu, &cb).unwrap();
    let mut p = ParameterSet::new();
    p.register("users", xavier_init(4, 3, 301), true);
    p.register("bundles", xavier_init(3, 3, 302), true);
    check_with(p, 1e-5, move |t, l| {
        let layers = propagate_unified(t, node(l, 0), node(l, 1), &graph, 3).unwrap();
        let (u, b) = aggregate_layers(t, &layers, 4, 3);
        let nu = t.sq_norm(u);
        let nb = t.sq_norm(b);
        t.add(nu, nb)
    });
}

#[test]
fn grad_losses() {
    check_with(two(401, (5, 4), (5, 4)), 1e-5, |t, l| {
        discrete_contrastive(t, node(l, 0), node(l, 1), 0.25).unwrap()
    });
    check_with(one(402, 5, 4), 1e-5, |t, l| {
        concrete_contrastive(t, node(l, 0), 0.25).unwrap()
    });
    check_with(two(403, (6, 1), (6, 1)), 1e-5, |t, l| {
        bpr_loss(t, node(l, 0), node(l, 1))
    });
    check_with(two(404, (5, 3), (5, 3)), 1e-5, |t, l| {
        let r = final_repr(t, node(l, 0), node(l, 1), 0.5).unwrap();
        let s = score_rows(t, r, r);
        t.sq_norm(s)
    });
}

/// End-to-end through the causation network: scores → softmax → enhancement
/// → both sub-views → fusion, on a small instance.
#[test]
fn grad_coherent_pipeline() {
    let mask = small_mask();
    let ui = SparseBinaryMatrix::from_pairs(3, 5, &[(0, 0), (0, 2), (1, 1), (2, 3), (2, 4)]);
    let bi = SparseBinaryMatrix::from_pairs(2, 5, &[(0, 0), (0, 1), (1, 2), (1, 3), (1, 4)]);
    let g_ui = Arc::new(build_bipartite_adjacency(&ui));
    let g_bi = Arc::new(build_bipartite_adjacency(&bi));
    let user_items = Arc::new(ui);
    let bundle_items = Arc::new(bi);

    let d = 3;
    let prospects = 2;
    let mut p = ParameterSet::new();
    p.register("items", xavier_init(5, d, 500), true);
    p.register("users", xavier_init(3, d, 501), true);
    p.register("bundles", xavier_init(2, d, 502), true);
    for l in 0..prospects {
        p.register(&format!("p{l}"), xavier_init(d, 1, 510 + l as u64), true);
        p.register(&format!("src{l}"), xavier_init(d, d, 520 + l as u64), true);
        p.register(&format!("dst{l}"), xavier_init(d, d, 530 + l as u64), true);
    }
    p.register("bias", xavier_init(1, d, 540), true);

    check_with(p, 1e-4, move |t, l| {
        let items = node(l, 0);
        let users = node(l, 1);
        let bundles = node(l, 2);
        let mpc = MpcNodes {
            prospect: vec![node(l, 3), node(l, 6)],
            src_weight: vec![node(l, 4), node(l, 7)],
            dst_weight: vec![node(l, 5), node(l, 8)],
            bias: node(l, 9),
        };
        let scored = prospect_scores(t, items, &mpc, &mask, 0.2).unwrap();
        let matrices: Vec<NodeId> = scored
            .scores
            .iter()
            .map(|&s| causation_matrix(t, s, &mask, 1e-8))
            .collect();
        let enhanced = enhance_items(t, items, &matrices, &scored.src_projections, &mask, 0.6);
        let up = run_subview_up(t, users, enhanced, &g_ui, &bundle_items, 1).unwrap();
        let bc = run_subview_bc(t, bundles, enhanced, &g_bi, &user_items, 1).unwrap();
        let (rv_u, rv_b) = fuse_coherent(t, &up, &bc, 0.4).unwrap();
        let nu = t.sq_norm(rv_u);
        let nb = t.sq_norm(rv_b);
        t.add(nu, nb)
    });
}

/// The assembled objective over a real forward pass of the full model.
#[test]
fn grad_full_model_batch_loss() {
    let ds = toy_dataset();
    let cfg = TrainConfig {
        d: 4,
        h: 2,
        h_sub: 1,
        l: 2,
        lambda1: 0.5,
        lambda2: 0.01,
        batch_size: 6,
        seed: 77,
        ..TrainConfig::default()
    };
    let gc = GradCheckConfig {
        tol: 1e-4,
        ..GradCheckConfig::default()
    };
    let report = bunca::train::gradcheck_full_loss(&cfg, &ds, &gc).unwrap();
    assert!(report.passed(), "{report}");
    // every trainable tensor was covered
    assert_eq!(report.params.len(), 3 + 2 * (3 * cfg.l + 1));
}

/// Leaf independence and combined-objective wiring.
#[test]
fn grad_total_objective_wiring() {
    let mut p = ParameterSet::new();
    p.register("pos", xavier_init(4, 1, 601), true);
    p.register("neg", xavier_init(4, 1, 602), true);
    p.register("w", xavier_init(3, 3, 603), true);
    check_with(p, 1e-5, |t, l| {
        let bpr = bpr_loss(t, node(l, 0), node(l, 1));
        let c = t.constant(Mat::from_fn(4, 2, |r, c| 0.3 * (r as f64) - 0.2 * (c as f64) + 0.1));
        let fused = fuse_multiview(t, c, c);
        let du = concrete_contrastive(t, fused, 0.5).unwrap();
        let dc = discrete_contrastive(t, c, fused, 0.5).unwrap();
        let cl = combine_contrastive(t, dc, dc, du, du, 0.3).unwrap();
        let reg = l2_norm(t, &[node(l, 2)]);
        total_loss(t, bpr, cl, reg, 0.7, 0.02).unwrap()
    });
}
