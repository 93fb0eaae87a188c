//! Model assembly, negative sampling, the training loop, and checkpoints.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::autodiff::{NodeId, Tape};
use crate::coherent::{
    causation_matrix, enhance_items, fuse_coherent, prospect_scores, run_subview_bc,
    run_subview_up, MpcConfig, MpcNodes, SubViewNodes, CAUSATION_EPS, LEAKY_SLOPE,
};
use crate::cohesive::{aggregate_layers, propagate_unified, CohesiveConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::objective::{
    bpr_loss, combine_contrastive, concrete_contrastive, discrete_contrastive, final_repr,
    fuse_multiview, l2_norm, score_rows, total_loss,
};
use crate::params::{
    adam_step, read_tensors, write_tensors, xavier_init, AdamState, ParameterSet,
};
use crate::sparse::{
    binarize, build_bipartite_adjacency, build_unified_graph, cooccurrence, CooccurrenceSide,
    EdgeMask, NormalizedAdjacency, SparseBinaryMatrix, UnifiedGraph,
};
use crate::tensor::Mat;

/// Full training configuration. Field names double as the config-file keys
/// exposed by the CLI.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Embedding dimension d.
    pub d: usize,
    /// Unified-graph propagation depth.
    pub h: usize,
    /// Sub-view propagation depth.
    pub h_sub: usize,
    /// Causation prospects per sub-view.
    pub l: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Validate on the tune split every this many epochs (0 disables).
    pub eval_every: usize,
    /// Consecutive non-improving validations tolerated (0 disables early stop).
    pub patience: usize,
    pub seed: u64,
    /// Co-occurrence thresholds for the two item masks.
    pub theta_up: u32,
    pub theta_bc: u32,
    pub ks: Vec<usize>,
    /// Negatives sampled per positive (triples are duplicated).
    pub negatives_per_pos: usize,
    /// Restrict the L2 regularizer to batch-touched embedding rows.
    pub reg_batch_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            h: 2,
            h_sub: 1,
            l: 2,
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.5,
            mu: 0.5,
            tau: 0.25,
            lambda1: 0.04,
            lambda2: 1e-5,
            lr: 1e-3,
            batch_size: 128,
            epochs: 100,
            eval_every: 5,
            patience: 10,
            seed: 42,
            theta_up: 1,
            theta_bc: 1,
            ks: vec![10, 20],
            negatives_per_pos: 1,
            reg_batch_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        CohesiveConfig { layers: self.h }.validate()?;
        CohesiveConfig { layers: self.h_sub }.validate()?;
        MpcConfig {
            prospects: self.l,
            alpha: self.alpha,
            eps: CAUSATION_EPS,
            leaky_slope: LEAKY_SLOPE,
        }
        .validate()?;
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("mu", self.mu)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {v}")));
            }
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda1/lambda2 must be >= 0".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.negatives_per_pos == 0 {
            return Err(Error::Config(
                "batch_size, epochs and negatives_per_pos must be >= 1".into(),
            ));
        }
        if self.theta_up == 0 || self.theta_bc == 0 {
            return Err(Error::Config("mask thresholds must be >= 1".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be a nonempty list of positive K".into()));
        }
        Ok(())
    }

    pub fn hypers(&self) -> ModelHypers {
        ModelHypers {
            d: self.d,
            h: self.h,
            h_sub: self.h_sub,
            l: self.l,
            alpha: self.alpha,
            beta: self.beta,
            mu: self.mu,
            theta_up: self.theta_up,
            theta_bc: self.theta_bc,
        }
    }
}

/// The subset of hyperparameters a checkpoint must carry to reproduce
/// inference exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelHypers {
    pub d: usize,
    pub h: usize,
    pub h_sub: usize,
    pub l: usize,
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub theta_up: u32,
    pub theta_bc: u32,
}

/// Every graph structure one forward pass needs, built once per dataset.
#[derive(Debug, Clone)]
pub struct GraphSet {
    pub unified: UnifiedGraph,
    pub user_item_graph: Arc<NormalizedAdjacency>,
    pub bundle_item_graph: Arc<NormalizedAdjacency>,
    pub mask_up: Arc<EdgeMask>,
    pub mask_bc: Arc<EdgeMask>,
    pub bundle_items: Arc<SparseBinaryMatrix>,
    pub user_items: Arc<SparseBinaryMatrix>,
    pub n_users: usize,
    pub n_bundles: usize,
    pub n_items: usize,
}

impl GraphSet {
    /// Build all graphs from the training interactions plus the full
    /// user–item and bundle–item relations.
    pub fn build(ds: &Dataset, theta_up: u32, theta_bc: u32) -> Result<GraphSet> {
        let cu = binarize(&cooccurrence(&ds.x_train, CooccurrenceSide::Rows), 1);
        let cb = binarize(&cooccurrence(&ds.x_train, CooccurrenceSide::Cols), 1);
        let unified = build_unified_graph(&ds.x_train, &cu, &cb)?;
        let user_item_graph = Arc::new(build_bipartite_adjacency(&ds.user_items));
        let bundle_item_graph = Arc::new(build_bipartite_adjacency(&ds.bundle_items));
        let mask_up = EdgeMask::new(binarize(
            &cooccurrence(&ds.user_items, CooccurrenceSide::Cols),
            theta_up,
        ));
        let mask_bc = EdgeMask::new(binarize(
            &cooccurrence(&ds.bundle_items, CooccurrenceSide::Cols),
            theta_bc,
        ));
        Ok(GraphSet {
            unified,
            user_item_graph,
            bundle_item_graph,
            mask_up,
            mask_bc,
            bundle_items: Arc::new(ds.bundle_items.clone()),
            user_items: Arc::new(ds.user_items.clone()),
            n_users: ds.n_users,
            n_bundles: ds.n_bundles,
            n_items: ds.n_items,
        })
    }
}

/// Trainable parameters plus the hyperparameters that fix the architecture.
#[derive(Debug, Clone)]
pub struct BuncaModel {
    pub params: ParameterSet,
    pub hypers: ModelHypers,
}

const VIEWS: [&str; 2] = ["up", "bc"];

impl BuncaModel {
    /// Xavier-initialize all parameters with per-tensor seeds derived from
    /// `seed`. Registration order is fixed and shared with checkpoints.
    pub fn init(
        n_users: usize,
        n_bundles: usize,
        n_items: usize,
        hypers: ModelHypers,
        seed: u64,
    ) -> Self {
        let mut master = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let d = hypers.d;
        let mut next = |rows: usize, cols: usize, params: &mut ParameterSet, name: &str| {
            let s: u64 = master.gen();
            params.register(name, xavier_init(rows, cols, s), true);
        };
        next(n_users, d, &mut params, "user_embed");
        next(n_bundles, d, &mut params, "bundle_embed");
        next(n_items, d, &mut params, "item_embed");
        for view in VIEWS {
            for l in 0..hypers.l {
                next(d, 1, &mut params, &format!("{view}.prospect{l}"));
                next(d, d, &mut params, &format!("{view}.src{l}"));
                next(d, d, &mut params, &format!("{view}.dst{l}"));
            }
            next(1, d, &mut params, &format!("{view}.bias"));
        }
        BuncaModel { params, hypers }
    }

    /// Number of tensors the architecture defines: three embedding tables
    /// plus, per sub-view, L·(prospect, src, dst) and one bias.
    pub fn expected_tensor_count(&self) -> usize {
        3 + 2 * (3 * self.hypers.l + 1)
    }

    pub fn check_compatible(&self, ds: &Dataset) -> Result<()> {
        let checks = [
            ("user_embed", ds.n_users),
            ("bundle_embed", ds.n_bundles),
            ("item_embed", ds.n_items),
        ];
        for (name, expected) in checks {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
            if t.value.rows != expected {
                return Err(Error::dimension(
                    format!("tensor {name} vs dataset"),
                    expected,
                    t.value.rows,
                ));
            }
        }
        Ok(())
    }

    fn leaf(&self, leaves: &[Option<NodeId>], name: &str) -> NodeId {
        leaves[self.params.index_of(name).unwrap_or_else(|| panic!("missing tensor {name}"))]
            .expect("trainable tensor bound as leaf")
    }

    fn mpc_leaves(&self, leaves: &[Option<NodeId>], view: &str) -> MpcNodes {
        MpcNodes {
            prospect: (0..self.hypers.l)
                .map(|l| self.leaf(leaves, &format!("{view}.prospect{l}")))
                .collect(),
            src_weight: (0..self.hypers.l)
                .map(|l| self.leaf(leaves, &format!("{view}.src{l}")))
                .collect(),
            dst_weight: (0..self.hypers.l)
                .map(|l| self.leaf(leaves, &format!("{view}.dst{l}")))
                .collect(),
            bias: self.leaf(leaves, &format!("{view}.bias")),
        }
    }

    /// MPCNet parameters as tape constants (inference/export path).
    pub fn mpc_constants(&self, tape: &mut Tape, view: &str) -> MpcNodes {
        let get = |tape: &mut Tape, name: &str| {
            tape.constant(self.params.get(name).unwrap_or_else(|| panic!("missing {name}")).value.clone())
        };
        MpcNodes {
            prospect: (0..self.hypers.l)
                .map(|l| get(tape, &format!("{view}.prospect{l}")))
                .collect(),
            src_weight: (0..self.hypers.l)
                .map(|l| get(tape, &format!("{view}.src{l}")))
                .collect(),
            dst_weight: (0..self.hypers.l)
                .map(|l| get(tape, &format!("{view}.dst{l}")))
                .collect(),
            bias: get(tape, &format!("{view}.bias")),
        }
    }

    /// Item co-occurrence mask for one sub-view of a dataset.
    pub fn causation_mask(&self, ds: &Dataset, view: &str) -> Result<Arc<EdgeMask>> {
        let (relation, theta) = match view {
            "up" => (&ds.user_items, self.hypers.theta_up),
            "bc" => (&ds.bundle_items, self.hypers.theta_bc),
            other => return Err(Error::Config(format!("unknown sub-view {other}"))),
        };
        Ok(EdgeMask::new(binarize(
            &cooccurrence(relation, CooccurrenceSide::Cols),
            theta,
        )))
    }

    /// Run the full two-view forward pass over all entities.
    pub fn forward(&self, tape: &mut Tape, graphs: &GraphSet) -> Result<ForwardState> {
        let leaves = self.params.bind_leaves(tape);
        let user_embed = self.leaf(&leaves, "user_embed");
        let bundle_embed = self.leaf(&leaves, "bundle_embed");
        let item_embed = self.leaf(&leaves, "item_embed");

        // cohesive branch
        let layers = propagate_unified(tape, user_embed, bundle_embed, &graphs.unified, self.hypers.h)?;
        let (sv_users, sv_bundles) =
            aggregate_layers(tape, &layers, graphs.n_users, graphs.n_bundles);

        // coherent branch: enhance items per sub-view, propagate, pool
        let mut enhanced = Vec::with_capacity(2);
        let mut causation = Vec::with_capacity(2);
        for (view, mask) in VIEWS.iter().zip([&graphs.mask_up, &graphs.mask_bc]) {
            let mpc = self.mpc_leaves(&leaves, view);
            let scored = prospect_scores(tape, item_embed, &mpc, mask, LEAKY_SLOPE)?;
            let matrices: Vec<NodeId> = scored
                .scores
                .iter()
                .map(|&s| causation_matrix(tape, s, mask, CAUSATION_EPS))
                .collect();
            enhanced.push(enhance_items(
                tape,
                item_embed,
                &matrices,
                &scored.src_projections,
                mask,
                self.hypers.alpha,
            ));
            causation.push(matrices);
        }
        let (enhanced_up, enhanced_bc) = (enhanced[0], enhanced[1]);
        let causation_bc = causation.pop().expect("two views");
        let causation_up = causation.pop().expect("two views");

        let up = run_subview_up(
            tape,
            user_embed,
            enhanced_up,
            &graphs.user_item_graph,
            &graphs.bundle_items,
            self.hypers.h_sub,
        )?;
        let bc = run_subview_bc(
            tape,
            bundle_embed,
            enhanced_bc,
            &graphs.bundle_item_graph,
            &graphs.user_items,
            self.hypers.h_sub,
        )?;
        let (rv_users, rv_bundles) = fuse_coherent(tape, &up, &bc, self.hypers.beta)?;

        Ok(ForwardState {
            leaves,
            sv_users,
            sv_bundles,
            enhanced_up,
            enhanced_bc,
            causation_up,
            causation_bc,
            up,
            bc,
            rv_users,
            rv_bundles,
        })
    }

    /// Final 2d-dimensional representations for every user and bundle.
    pub fn infer_reprs(&self, graphs: &GraphSet) -> Result<FinalReprs> {
        let mut tape = Tape::new();
        let state = self.forward(&mut tape, graphs)?;
        let mu = self.hypers.mu;
        let compose = |sv: &Mat, rv: &Mat| {
            let mut out = Mat::zeros(sv.rows, sv.cols + rv.cols);
            for r in 0..sv.rows {
                let row = out.row_mut(r);
                for (o, &v) in row[..sv.cols].iter_mut().zip(sv.row(r)) {
                    *o = mu * v;
                }
                row[sv.cols..].copy_from_slice(rv.row(r));
            }
            out
        };
        Ok(FinalReprs {
            users: compose(tape.value(state.sv_users), tape.value(state.rv_users)),
            bundles: compose(tape.value(state.sv_bundles), tape.value(state.rv_bundles)),
        })
    }
}

/// Node handles for every intermediate of one forward pass.
pub struct ForwardState {
    pub leaves: Vec<Option<NodeId>>,
    pub sv_users: NodeId,
    pub sv_bundles: NodeId,
    pub enhanced_up: NodeId,
    pub enhanced_bc: NodeId,
    pub causation_up: Vec<NodeId>,
    pub causation_bc: Vec<NodeId>,
    pub up: SubViewNodes,
    pub bc: SubViewNodes,
    pub rv_users: NodeId,
    pub rv_bundles: NodeId,
}

/// Concatenated [μ·cohesive ∥ coherent] rows for scoring and ranking.
#[derive(Debug, Clone)]
pub struct FinalReprs {
    pub users: Mat,
    pub bundles: Mat,
}

impl FinalReprs {
    pub fn score(&self, user: usize, bundle: usize) -> f64 {
        self.users
            .row(user)
            .iter()
            .zip(self.bundles.row(bundle))
            .map(|(&a, &b)| a * b)
            .sum()
    }
}

/// Aligned (user, positive bundle, negative bundle) arrays.
#[derive(Debug, Clone)]
pub struct TripleBatch {
    pub users: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TripleBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

fn sample_negative(
    x_train: &SparseBinaryMatrix,
    user: usize,
    rng: &mut ChaCha20Rng,
) -> Result<usize> {
    if x_train.row(user).len() >= x_train.n_cols {
        return Err(Error::Data(format!(
            "user {user} interacts with every bundle; cannot sample a negative"
        )));
    }
    loop {
        let b = rng.gen_range(0..x_train.n_cols);
        if !x_train.contains(user, b) {
            return Ok(b);
        }
    }
}

/// Draw `batch_size` positives uniformly (with replacement) and reject-sample
/// one negative bundle per positive.
pub fn sample_triples(
    x_train: &SparseBinaryMatrix,
    batch_size: usize,
    rng: &mut ChaCha20Rng,
) -> Result<TripleBatch> {
    let positives: Vec<(usize, usize)> = x_train.iter_entries().collect();
    if positives.is_empty() {
        return Err(Error::Data("training split has no interactions".into()));
    }
    let mut batch = TripleBatch {
        users: Vec::with_capacity(batch_size),
        positives: Vec::with_capacity(batch_size),
        negatives: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let &(u, b) = &positives[rng.gen_range(0..positives.len())];
        batch.users.push(u);
        batch.positives.push(b);
        batch.negatives.push(sample_negative(x_train, u, rng)?);
    }
    Ok(batch)
}

/// One scored batch: the tape plus handles to its losses and scores.
pub struct BatchForward {
    pub tape: Tape,
    pub state: ForwardState,
    pub pos_scores: NodeId,
    pub neg_scores: NodeId,
    pub bpr: NodeId,
    pub contrastive: NodeId,
    pub regularizer: NodeId,
    pub total: NodeId,
}

fn sorted_unique(ids: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = ids.collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Run the full forward pass, gather the batch rows, and assemble every
/// loss term. Contrastive losses see the batch's unique users and unique
/// (positive ∪ negative) bundles.
pub fn forward_batch(
    model: &BuncaModel,
    graphs: &GraphSet,
    batch: &TripleBatch,
    cfg: &TrainConfig,
) -> Result<BatchForward> {
    assert!(!batch.is_empty(), "batch must be nonempty");
    let mut tape = Tape::new();
    let state = model.forward(&mut tape, graphs)?;

    let uniq_users = Arc::new(sorted_unique(batch.users.iter().copied()));
    let uniq_bundles = Arc::new(sorted_unique(
        batch.positives.iter().chain(&batch.negatives).copied(),
    ));

    let su = tape.gather_rows(state.sv_users, uniq_users.clone());
    let ru = tape.gather_rows(state.rv_users, uniq_users.clone());
    let sb = tape.gather_rows(state.sv_bundles, uniq_bundles.clone());
    let rb = tape.gather_rows(state.rv_bundles, uniq_bundles.clone());

    let dc_u = discrete_contrastive(&mut tape, su, ru, cfg.tau)?;
    let dc_b = discrete_contrastive(&mut tape, sb, rb, cfg.tau)?;
    let fused_u = fuse_multiview(&mut tape, su, ru);
    let fused_b = fuse_multiview(&mut tape, sb, rb);
    let cc_u = concrete_contrastive(&mut tape, fused_u, cfg.tau)?;
    let cc_b = concrete_contrastive(&mut tape, fused_b, cfg.tau)?;
    let contrastive = combine_contrastive(&mut tape, dc_u, dc_b, cc_u, cc_b, cfg.gamma)?;

    let users_idx = Arc::new(batch.users.clone());
    let pos_idx = Arc::new(batch.positives.clone());
    let neg_idx = Arc::new(batch.negatives.clone());
    let sv_u_rows = tape.gather_rows(state.sv_users, users_idx.clone());
    let rv_u_rows = tape.gather_rows(state.rv_users, users_idx);
    let sv_pos = tape.gather_rows(state.sv_bundles, pos_idx.clone());
    let rv_pos = tape.gather_rows(state.rv_bundles, pos_idx);
    let sv_neg = tape.gather_rows(state.sv_bundles, neg_idx.clone());
    let rv_neg = tape.gather_rows(state.rv_bundles, neg_idx);

    let user_repr = final_repr(&mut tape, sv_u_rows, rv_u_rows, cfg.mu)?;
    let pos_repr = final_repr(&mut tape, sv_pos, rv_pos, cfg.mu)?;
    let neg_repr = final_repr(&mut tape, sv_neg, rv_neg, cfg.mu)?;
    let pos_scores = score_rows(&mut tape, user_repr, pos_repr);
    let neg_scores = score_rows(&mut tape, user_repr, neg_repr);
    let bpr = bpr_loss(&mut tape, pos_scores, neg_scores);

    let reg_leaves: Vec<NodeId> = if cfg.reg_batch_only {
        let user_leaf = model.leaf(&state.leaves, "user_embed");
        let bundle_leaf = model.leaf(&state.leaves, "bundle_embed");
        let batch_users = tape.gather_rows(user_leaf, uniq_users);
        let batch_bundles = tape.gather_rows(bundle_leaf, uniq_bundles);
        let mut v = vec![batch_users, batch_bundles, model.leaf(&state.leaves, "item_embed")];
        for view in VIEWS {
            for l in 0..model.hypers.l {
                v.push(model.leaf(&state.leaves, &format!("{view}.prospect{l}")));
                v.push(model.leaf(&state.leaves, &format!("{view}.src{l}")));
                v.push(model.leaf(&state.leaves, &format!("{view}.dst{l}")));
            }
            v.push(model.leaf(&state.leaves, &format!("{view}.bias")));
        }
        v
    } else {
        state.leaves.iter().flatten().copied().collect()
    };
    let regularizer = l2_norm(&mut tape, &reg_leaves);
    let total = total_loss(&mut tape, bpr, contrastive, regularizer, cfg.lambda1, cfg.lambda2)?;

    Ok(BatchForward {
        tape,
        state,
        pos_scores,
        neg_scores,
        bpr,
        contrastive,
        regularizer,
        total,
    })
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub bpr: f64,
    pub contrastive: f64,
    /// Wall time of the epoch; excluded from the metrics stream so that
    /// equal-seed runs emit identical bytes.
    #[serde(skip)]
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tune_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tune_ndcg: Option<f64>,
}

impl EpochRecord {
    /// One deterministic JSON object for the metrics stream.
    pub fn metrics_line(&self) -> String {
        serde_json::to_string(self).expect("serializable record")
    }
}

pub type TrainHistory = Vec<EpochRecord>;

pub struct FitResult {
    /// Parameters after the last completed epoch.
    pub model: BuncaModel,
    /// Best-by-validation parameters (equal to final when validation never ran).
    pub best_params: ParameterSet,
    pub best_tune_recall: Option<f64>,
    pub history: TrainHistory,
    pub stopped_early: bool,
}

/// Validation metric used for early stopping and best-checkpoint tracking.
pub const EARLY_STOP_K: usize = 20;

/// Train on `dataset` with Adam on shuffled triple batches. Validates on
/// the tune split every `eval_every` epochs, retains the best parameters by
/// tune Recall@20, and stops early after `patience` stale validations.
pub fn fit(cfg: &TrainConfig, dataset: &Dataset) -> Result<FitResult> {
    cfg.validate()?;
    let graphs = GraphSet::build(dataset, cfg.theta_up, cfg.theta_bc)?;
    let mut model = BuncaModel::init(
        dataset.n_users,
        dataset.n_bundles,
        dataset.n_items,
        cfg.hypers(),
        cfg.seed,
    );
    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);

    let mut positives: Vec<(usize, usize)> = dataset.x_train.iter_entries().collect();
    if positives.is_empty() {
        return Err(Error::Data("training split has no interactions".into()));
    }

    let tune_available = dataset.x_tune.nnz() > 0;
    let mut history: TrainHistory = Vec::with_capacity(cfg.epochs);
    let mut best_params = model.params.clone();
    let mut best_recall: Option<f64> = None;
    let mut stale = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        positives.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in positives.chunks(cfg.batch_size) {
            let mut batch = TripleBatch {
                users: Vec::with_capacity(chunk.len() * cfg.negatives_per_pos),
                positives: Vec::with_capacity(chunk.len() * cfg.negatives_per_pos),
                negatives: Vec::with_capacity(chunk.len() * cfg.negatives_per_pos),
            };
            for &(u, b) in chunk {
                for _ in 0..cfg.negatives_per_pos {
                    batch.users.push(u);
                    batch.positives.push(b);
                    batch.negatives.push(sample_negative(&dataset.x_train, u, &mut rng)?);
                }
            }
            let fwd = forward_batch(&model, &graphs, &batch, cfg)?;
            let loss = fwd.tape.scalar_value(fwd.total);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    message: format!("batch loss is {loss}"),
                });
            }
            sums.0 += loss;
            sums.1 += fwd.tape.scalar_value(fwd.bpr);
            sums.2 += fwd.tape.scalar_value(fwd.contrastive);
            batches += 1;

            let grads = fwd.tape.backward(fwd.total);
            model.params.accumulate_grads(&fwd.tape, &grads);
            adam_step(&mut model.params, &mut adam, cfg.lr, 0.9, 0.999, 1e-8)?;
        }

        let mut record = EpochRecord {
            epoch,
            loss: sums.0 / batches as f64,
            bpr: sums.1 / batches as f64,
            contrastive: sums.2 / batches as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            tune_recall: None,
            tune_ndcg: None,
        };

        if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 && tune_available {
            let report = crate::eval::evaluate_all(
                &model,
                &graphs,
                dataset,
                &[EARLY_STOP_K],
                crate::eval::EvalTarget::Tune,
            )?;
            if report.users_evaluated > 0 {
                let recall = report.recall[0];
                record.tune_recall = Some(recall);
                record.tune_ndcg = Some(report.ndcg[0]);
                let improved = best_recall.is_none_or(|b| recall > b);
                if best_recall.is_none_or(|b| recall >= b) {
                    best_params = model.params.clone();
                    best_recall = Some(best_recall.map_or(recall, |b: f64| b.max(recall)));
                }
                if improved {
                    stale = 0;
                } else {
                    stale += 1;
                    if cfg.patience > 0 && stale >= cfg.patience {
                        history.push(record);
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
        history.push(record);
    }

    if best_recall.is_none() {
        best_params = model.params.clone();
    }
    Ok(FitResult {
        model,
        best_params,
        best_tune_recall: best_recall,
        history,
        stopped_early,
    })
}

// ---- checkpoints --------------------------------------------------------

const HYPER_NAMES: [&str; 9] = [
    "hyper.d",
    "hyper.h",
    "hyper.h_sub",
    "hyper.l",
    "hyper.alpha",
    "hyper.beta",
    "hyper.mu",
    "hyper.theta_up",
    "hyper.theta_bc",
];

fn hyper_values(h: &ModelHypers) -> [f64; 9] {
    [
        h.d as f64,
        h.h as f64,
        h.h_sub as f64,
        h.l as f64,
        h.alpha,
        h.beta,
        h.mu,
        h.theta_up as f64,
        h.theta_bc as f64,
    ]
}

/// Write hypers (as 1×1 tensors) followed by all parameters in
/// registration order. Bit-identical for identical models.
pub fn save_checkpoint(model: &BuncaModel, path: &Path) -> Result<()> {
    let hv = hyper_values(&model.hypers);
    let hyper_mats: Vec<Mat> = hv.iter().map(|&v| Mat::scalar(v)).collect();
    let mut items: Vec<(&str, &Mat)> = HYPER_NAMES
        .iter()
        .zip(&hyper_mats)
        .map(|(&n, m)| (n, m))
        .collect();
    for (name, tensor) in model.params.iter() {
        items.push((name, &tensor.value));
    }
    write_tensors(path, &items)
}

/// Rebuild a model from a checkpoint, validating the tensor inventory and
/// every shape against the stored hypers.
pub fn load_checkpoint(path: &Path) -> Result<BuncaModel> {
    let tensors = read_tensors(path)?;
    let mut hypers_raw = std::collections::HashMap::new();
    let mut model_tensors: Vec<(String, Mat)> = Vec::new();
    for (name, mat) in tensors {
        if let Some(stripped) = name.strip_prefix("hyper.") {
            if mat.numel() != 1 {
                return Err(Error::Format(format!("hyper tensor {name} must be 1x1")));
            }
            hypers_raw.insert(stripped.to_string(), mat.data[0]);
        } else {
            model_tensors.push((name, mat));
        }
    }
    let fetch = |key: &str| {
        hypers_raw
            .get(key)
            .copied()
            .ok_or_else(|| Error::Format(format!("checkpoint is missing hyper.{key}")))
    };
    let hypers = ModelHypers {
        d: fetch("d")? as usize,
        h: fetch("h")? as usize,
        h_sub: fetch("h_sub")? as usize,
        l: fetch("l")? as usize,
        alpha: fetch("alpha")?,
        beta: fetch("beta")?,
        mu: fetch("mu")?,
        theta_up: fetch("theta_up")? as u32,
        theta_bc: fetch("theta_bc")? as u32,
    };

    let mut expected: Vec<(String, Option<(usize, usize)>)> = vec![
        ("user_embed".into(), None),
        ("bundle_embed".into(), None),
        ("item_embed".into(), None),
    ];
    let d = hypers.d;
    for view in VIEWS {
        for l in 0..hypers.l {
            expected.push((format!("{view}.prospect{l}"), Some((d, 1))));
            expected.push((format!("{view}.src{l}"), Some((d, d))));
            expected.push((format!("{view}.dst{l}"), Some((d, d))));
        }
        expected.push((format!("{view}.bias"), Some((1, d))));
    }

    let mut params = ParameterSet::new();
    for (name, mat) in &model_tensors {
        let spec = expected.iter().find(|(n, _)| n == name).ok_or_else(|| {
            Error::Format(format!("unknown tensor name {name} in checkpoint"))
        })?;
        let shape_ok = match spec.1 {
            Some((r, c)) => mat.rows == r && mat.cols == c,
            None => mat.cols == d && mat.rows > 0,
        };
        if !shape_ok {
            return Err(Error::dimension(
                format!("checkpoint tensor {name}"),
                match spec.1 {
                    Some((r, c)) => format!("{r}x{c}"),
                    None => format!("?x{d}"),
                },
                format!("{}x{}", mat.rows, mat.cols),
            ));
        }
        params.register(name, mat.clone(), true);
    }
    for (name, _) in &expected {
        if params.index_of(name).is_none() {
            return Err(Error::Format(format!("checkpoint is missing tensor {name}")));
        }
    }
    Ok(BuncaModel { params, hypers })
}

/// Verify the analytic gradient of the full training objective against
/// central differences on a fixed batch of `dataset`.
pub fn gradcheck_full_loss(
    cfg: &TrainConfig,
    dataset: &Dataset,
    gc: &crate::gradcheck::GradCheckConfig,
) -> Result<crate::gradcheck::GradCheckReport> {
    cfg.validate()?;
    let graphs = GraphSet::build(dataset, cfg.theta_up, cfg.theta_bc)?;
    let model = BuncaModel::init(
        dataset.n_users,
        dataset.n_bundles,
        dataset.n_items,
        cfg.hypers(),
        cfg.seed,
    );
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0xBA7C4);
    let batch = sample_triples(&dataset.x_train, cfg.batch_size.min(8), &mut rng)?;
    // dry run so closure unwraps can't hide setup errors
    let _ = forward_batch(&model, &graphs, &batch, cfg)?;

    let hypers = model.hypers;
    let value_fn = |p: &ParameterSet| {
        let m = BuncaModel {
            params: p.clone(),
            hypers,
        };
        let fwd = forward_batch(&m, &graphs, &batch, cfg).expect("checked by dry run");
        fwd.tape.scalar_value(fwd.total)
    };
    let mut params = model.params;
    let grad_fn = |p: &mut ParameterSet| {
        let m = BuncaModel {
            params: p.clone(),
            hypers,
        };
        let fwd = forward_batch(&m, &graphs, &batch, cfg).expect("checked by dry run");
        let grads = fwd.tape.backward(fwd.total);
        p.accumulate_grads(&fwd.tape, &grads);
        fwd.tape.scalar_value(fwd.total)
    };
    crate::gradcheck::gradcheck(&mut params, value_fn, grad_fn, gc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_dataset;

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            d: 4,
            h: 2,
            h_sub: 1,
            l: 2,
            batch_size: 8,
            epochs: 1,
            eval_every: 0,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let ds = toy_dataset();
        let mut r1 = ChaCha20Rng::seed_from_u64(4);
        let mut r2 = ChaCha20Rng::seed_from_u64(4);
        let b1 = sample_triples(&ds.x_train, 16, &mut r1).unwrap();
        let b2 = sample_triples(&ds.x_train, 16, &mut r2).unwrap();
        assert_eq!(b1.users, b2.users);
        assert_eq!(b1.positives, b2.positives);
        assert_eq!(b1.negatives, b2.negatives);
    }

    #[test]
    fn negative_is_forced_with_two_bundles() {
        let x = SparseBinaryMatrix::from_pairs(1, 2, &[(0, 0)]);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..20 {
            let b = sample_triples(&x, 1, &mut rng).unwrap();
            assert_eq!(b.negatives, vec![1]);
        }
    }

    #[test]
    fn saturated_user_cannot_sample_negative() {
        let x = SparseBinaryMatrix::from_pairs(1, 2, &[(0, 0), (0, 1)]);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        match sample_triples(&x, 1, &mut rng) {
            Err(Error::Data(msg)) => assert!(msg.contains("user 0")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn negative_sampling_uniform_over_candidates() {
        // one user, interacts with bundle 0 of 3; negatives must split
        // evenly between bundles 1 and 2
        let x = SparseBinaryMatrix::from_pairs(1, 3, &[(0, 0)]);
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let n = 10_000usize;
        let batch = sample_triples(&x, n, &mut rng).unwrap();
        let count1 = batch.negatives.iter().filter(|&&b| b == 1).count();
        let p = 0.5;
        let sigma = ((n as f64) * p * (1.0 - p)).sqrt();
        assert!(
            ((count1 as f64) - (n as f64) * p).abs() <= 3.0 * sigma,
            "negative frequency {count1}/{n} outside 3 sigma"
        );
        assert!(batch.negatives.iter().all(|&b| b == 1 || b == 2));
    }

    #[test]
    fn forward_batch_smoke_finite() {
        let ds = toy_dataset();
        let cfg = toy_cfg();
        let graphs = GraphSet::build(&ds, 1, 1).unwrap();
        let model = BuncaModel::init(ds.n_users, ds.n_bundles, ds.n_items, cfg.hypers(), 9);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let batch = sample_triples(&ds.x_train, 1, &mut rng).unwrap();
        let fwd = forward_batch(&model, &graphs, &batch, &cfg).unwrap();
        for node in [fwd.total, fwd.bpr, fwd.contrastive, fwd.regularizer] {
            assert!(fwd.tape.scalar_value(node).is_finite());
        }
        assert!(fwd.tape.value(fwd.pos_scores).is_finite());
        assert!(fwd.tape.value(fwd.neg_scores).is_finite());
    }

    #[test]
    fn duplicate_users_deduplicated_for_contrastive() {
        let ds = toy_dataset();
        let cfg = toy_cfg();
        let graphs = GraphSet::build(&ds, 1, 1).unwrap();
        let model = BuncaModel::init(ds.n_users, ds.n_bundles, ds.n_items, cfg.hypers(), 9);
        let batch = TripleBatch {
            users: vec![0, 0, 1],
            positives: vec![ds.x_train.row(0)[0], ds.x_train.row(0)[0], ds.x_train.row(1)[0]],
            negatives: vec![4, 4, 4],
        };
        let dedup = TripleBatch {
            users: vec![0, 1],
            positives: vec![ds.x_train.row(0)[0], ds.x_train.row(1)[0]],
            negatives: vec![4, 4],
        };
        let a = forward_batch(&model, &graphs, &batch, &cfg).unwrap();
        let b = forward_batch(&model, &graphs, &dedup, &cfg).unwrap();
        // same unique entities -> identical contrastive loss
        assert_eq!(
            a.tape.scalar_value(a.contrastive),
            b.tape.scalar_value(b.contrastive)
        );
    }

    /// Independent dense reimplementation of the α=0, μ=1 forward path
    /// (no causation enhancement), scoring a batch through plain matrices.
    fn ablation_reference_bpr(
        model: &BuncaModel,
        graphs: &GraphSet,
        ds: &Dataset,
        batch: &TripleBatch,
        mu: f64,
        beta: f64,
    ) -> f64 {
        use crate::sparse::spmv_block_seq;
        let p = |name: &str| model.params.get(name).unwrap().value.clone();
        let stack = |a: &Mat, b: &Mat| {
            let mut data = a.data.clone();
            data.extend_from_slice(&b.data);
            Mat::from_vec(a.rows + b.rows, a.cols, data)
        };
        let sum_propagate = |adj: &NormalizedAdjacency, f0: &Mat, hops: usize| {
            let mut acc = f0.clone();
            let mut cur = f0.clone();
            for _ in 0..hops {
                cur = spmv_block_seq(adj, &cur);
                acc.add_assign(&cur);
            }
            acc
        };
        let d = model.hypers.d;

        // cohesive branch
        let unified0 = stack(&p("user_embed"), &p("bundle_embed"));
        let sv = sum_propagate(&graphs.unified.adj, &unified0, model.hypers.h);

        // UP sub-view with raw items (enhancement disabled at α=0)
        let up0 = stack(&p("user_embed"), &p("item_embed"));
        let up = sum_propagate(&graphs.user_item_graph, &up0, model.hypers.h_sub);
        let mut up_b = Mat::zeros(ds.n_bundles, d);
        for b in 0..ds.n_bundles {
            let items = ds.bundle_items.row(b);
            for &i in items {
                for c in 0..d {
                    up_b.data[b * d + c] += up.get(ds.n_users + i, c);
                }
            }
            if !items.is_empty() {
                for c in 0..d {
                    up_b.data[b * d + c] /= items.len() as f64;
                }
            }
        }

        // BC sub-view
        let bc0 = stack(&p("bundle_embed"), &p("item_embed"));
        let bc = sum_propagate(&graphs.bundle_item_graph, &bc0, model.hypers.h_sub);
        let mut bc_u = Mat::zeros(ds.n_users, d);
        for u in 0..ds.n_users {
            let items = ds.user_items.row(u);
            for &i in items {
                for c in 0..d {
                    bc_u.data[u * d + c] += bc.get(ds.n_bundles + i, c);
                }
            }
            if !items.is_empty() {
                for c in 0..d {
                    bc_u.data[u * d + c] /= items.len() as f64;
                }
            }
        }

        let score = |u: usize, b: usize| {
            let mut s = 0.0;
            for c in 0..d {
                let sv_u = sv.get(u, c);
                let sv_b = sv.get(ds.n_users + b, c);
                let rv_u = beta * bc_u.get(u, c) + (1.0 - beta) * up.get(u, c);
                let rv_b = beta * bc.get(b, c) + (1.0 - beta) * up_b.get(b, c);
                s += mu * mu * sv_u * sv_b + rv_u * rv_b;
            }
            s
        };
        let mut loss = 0.0;
        for k in 0..batch.len() {
            let x = score(batch.users[k], batch.positives[k]) - score(batch.users[k], batch.negatives[k]);
            loss += crate::autodiff::stable_softplus(-x);
        }
        loss / batch.len() as f64
    }

    #[test]
    fn ablated_forward_matches_dense_reimplementation() {
        let ds = toy_dataset();
        let cfg = TrainConfig {
            alpha: 0.0,
            mu: 1.0,
            gamma: 1.0,
            lambda1: 0.0,
            lambda2: 0.0,
            ..toy_cfg()
        };
        let graphs = GraphSet::build(&ds, 1, 1).unwrap();
        let model = BuncaModel::init(ds.n_users, ds.n_bundles, ds.n_items, cfg.hypers(), 31);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let batch = sample_triples(&ds.x_train, 6, &mut rng).unwrap();
        let fwd = forward_batch(&model, &graphs, &batch, &cfg).unwrap();
        let reference = ablation_reference_bpr(&model, &graphs, &ds, &batch, cfg.mu, cfg.beta);
        let got = fwd.tape.scalar_value(fwd.bpr);
        assert!(
            (got - reference).abs() < 1e-10,
            "bpr {got} vs dense reference {reference}"
        );
        // with λ1 = λ2 = 0 the total reduces to the ranking term
        assert_eq!(got, fwd.tape.scalar_value(fwd.total));
    }

    #[test]
    fn fit_single_epoch_history() {
        let ds = toy_dataset();
        let cfg = toy_cfg();
        let result = fit(&cfg, &ds).unwrap();
        assert_eq!(result.history.len(), 1);
        assert!(result.history[0].loss.is_finite());
        assert!(!result.stopped_early);
    }

    #[test]
    fn fit_is_bit_deterministic() {
        let ds = toy_dataset();
        let cfg = TrainConfig {
            epochs: 3,
            ..toy_cfg()
        };
        let a = fit(&cfg, &ds).unwrap();
        let b = fit(&cfg, &ds).unwrap();
        assert_eq!(a.history.len(), b.history.len());
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.metrics_line(), rb.metrics_line());
        }
        for (name, ta) in a.model.params.iter() {
            let tb = &b.model.params.get(name).unwrap().value;
            assert_eq!(ta.value.data, tb.data, "{name} differs");
        }
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let ds = toy_dataset();
        let cfg = toy_cfg();
        let graphs = GraphSet::build(&ds, 1, 1).unwrap();
        let mut model = BuncaModel::init(ds.n_users, ds.n_bundles, ds.n_items, cfg.hypers(), 9);
        let mut adam = AdamState::new(&model.params);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let batch = sample_triples(&ds.x_train, 8, &mut rng).unwrap();
        let mut losses = Vec::new();
        for _ in 0..6 {
            let fwd = forward_batch(&model, &graphs, &batch, &cfg).unwrap();
            losses.push(fwd.tape.scalar_value(fwd.total));
            let grads = fwd.tape.backward(fwd.total);
            model.params.accumulate_grads(&fwd.tape, &grads);
            adam_step(&mut model.params, &mut adam, cfg.lr, 0.9, 0.999, 1e-8).unwrap();
        }
        assert!(
            losses[5] < losses[0],
            "loss did not decrease over 5 steps: {losses:?}"
        );
        for w in losses.windows(2) {
            assert!(w[1] < w[0] + 1e-6, "non-monotone early steps: {losses:?}");
        }
    }

    #[test]
    fn one_step_changes_parameters() {
        let ds = toy_dataset();
        let cfg = toy_cfg();
        let graphs = GraphSet::build(&ds, 1, 1).unwrap();
        let mut model = BuncaModel::init(ds.n_users, ds.n_bundles, ds.n_items, cfg.hypers(), 9);
        let before = model.params.get("item_embed").unwrap().value.clone();
        let mut adam = AdamState::new(&model.params);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let batch = sample_triples(&ds.x_train, 8, &mut rng).unwrap();
        let fwd = forward_batch(&model, &graphs, &batch, &cfg).unwrap();
        let grads = fwd.tape.backward(fwd.total);
        model.params.accumulate_grads(&fwd.tape, &grads);
        adam_step(&mut model.params, &mut adam, cfg.lr, 0.9, 0.999, 1e-8).unwrap();
        assert_ne!(model.params.get("item_embed").unwrap().value.data, before.data);
    }

    #[test]
    fn divergence_is_detected_and_named() {
        let ds = toy_dataset();
        // a step this size overflows the projection products within an
        // epoch or two; the loss turns non-finite and training must abort
        let cfg = TrainConfig {
            lr: 1e200,
            epochs: 10,
            ..toy_cfg()
        };
        match fit(&cfg, &ds) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            Ok(_) => panic!("expected divergence with an absurd learning rate"),
            Err(other) => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let ds = toy_dataset();
        let cfg = toy_cfg();
        let model = BuncaModel::init(ds.n_users, ds.n_bundles, ds.n_items, cfg.hypers(), 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.hypers, model.hypers);
        assert_eq!(loaded.params.len(), model.params.len());
        for (name, t) in model.params.iter() {
            assert_eq!(loaded.params.get(name).unwrap().value.data, t.value.data);
        }
    }

    #[test]
    fn checkpoint_corrupted_header_rejected() {
        let ds = toy_dataset();
        let model = BuncaModel::init(ds.n_users, ds.n_bundles, ds.n_items, toy_cfg().hypers(), 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_unknown_tensor_rejected() {
        let ds = toy_dataset();
        let model = BuncaModel::init(ds.n_users, ds.n_bundles, ds.n_items, toy_cfg().hypers(), 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let hv = hyper_values(&model.hypers);
        let hyper_mats: Vec<Mat> = hv.iter().map(|&v| Mat::scalar(v)).collect();
        let rogue = Mat::scalar(1.0);
        let mut items: Vec<(&str, &Mat)> = HYPER_NAMES
            .iter()
            .zip(&hyper_mats)
            .map(|(&n, m)| (n, m))
            .collect();
        for (name, tensor) in model.params.iter() {
            items.push((name, &tensor.value));
        }
        items.push(("mystery_tensor", &rogue));
        write_tensors(&path, &items).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("mystery_tensor")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_dimension_mismatch_names_tensor() {
        let ds = toy_dataset();
        let model = BuncaModel::init(ds.n_users, ds.n_bundles, ds.n_items, toy_cfg().hypers(), 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        // incompatible dataset: 7 users instead of 6
        let bigger = crate::data::synth_dataset(&crate::data::SynthSpec {
            groups: 1,
            users_per_group: 7,
            bundles_per_group: 5,
            items_per_group: 8,
            noise_rate: 0.0,
            seed: 23,
        })
        .unwrap();
        match loaded.check_compatible(&bigger) {
            Err(Error::Dimension { context, .. }) => assert!(context.contains("user_embed")),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn single_group_dataset_reaches_full_recall_at_candidate_count() {
        // one group: every bundle is same-group, so once the few masked
        // interactions are removed the whole candidate list is relevant in
        // expectation and recall at the candidate count saturates
        let ds = crate::data::synth_dataset(&crate::data::SynthSpec {
            groups: 1,
            users_per_group: 6,
            bundles_per_group: 5,
            items_per_group: 8,
            noise_rate: 0.0,
            seed: 2,
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            ..toy_cfg()
        };
        let result = fit(&cfg, &ds).unwrap();
        let graphs = GraphSet::build(&ds, 1, 1).unwrap();
        let report = crate::eval::evaluate_all(
            &result.model,
            &graphs,
            &ds,
            &[ds.n_bundles],
            crate::eval::EvalTarget::Test { mask_tune: true },
        )
        .unwrap();
        assert_eq!(report.recall[0], 1.0);
        assert!(result.history.last().unwrap().loss < result.history[0].loss);
    }

    #[test]
    fn parameter_inventory_matches_architecture() {
        let ds = toy_dataset();
        let cfg = toy_cfg();
        let model = BuncaModel::init(ds.n_users, ds.n_bundles, ds.n_items, cfg.hypers(), 9);
        assert_eq!(model.params.len(), model.expected_tensor_count());
        assert_eq!(model.params.len(), 3 + 2 * (3 * cfg.l + 1));
        // every parameter is trainable exactly once
        assert_eq!(model.params.trainable_indices().len(), model.params.len());
    }
}
