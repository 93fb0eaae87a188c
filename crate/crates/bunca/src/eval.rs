//! Full-ranking top-K evaluation with train-interaction masking.

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::par;
use crate::train::{BuncaModel, FinalReprs, GraphSet};

/// One user's masked, descending-score bundle ranking. Ties break by
/// ascending bundle id so rankings are reproducible.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub user: usize,
    pub bundles: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Score every non-masked bundle for `user` and sort.
pub fn rank_bundles(reprs: &FinalReprs, user: usize, masked: &[usize]) -> Result<RankingResult> {
    if user >= reprs.users.rows {
        return Err(Error::Data(format!(
            "unknown user id {user} (have {})",
            reprs.users.rows
        )));
    }
    let mut order: Vec<(usize, f64)> = Vec::with_capacity(reprs.bundles.rows);
    for b in 0..reprs.bundles.rows {
        if masked.binary_search(&b).is_ok() {
            continue;
        }
        order.push((b, reprs.score(user, b)));
    }
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(RankingResult {
        user,
        bundles: order.iter().map(|&(b, _)| b).collect(),
        scores: order.iter().map(|&(_, s)| s).collect(),
    })
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    Ok(())
}

/// |top-K ∩ test| / |test|.
pub fn recall_at_k(ranking: &RankingResult, test: &[usize], k: usize) -> Result<f64> {
    check_k(k)?;
    assert!(!test.is_empty(), "test set must be nonempty");
    let hits = ranking
        .bundles
        .iter()
        .take(k)
        .filter(|b| test.binary_search(b).is_ok())
        .count();
    Ok(hits as f64 / test.len() as f64)
}

/// Binary-relevance NDCG: DCG over the top K at 1/log2(rank+1), normalized
/// by the ideal DCG truncated at min(|test|, K).
pub fn ndcg_at_k(ranking: &RankingResult, test: &[usize], k: usize) -> Result<f64> {
    check_k(k)?;
    assert!(!test.is_empty(), "test set must be nonempty");
    let mut dcg = 0.0;
    for (pos, b) in ranking.bundles.iter().take(k).enumerate() {
        if test.binary_search(b).is_ok() {
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..test.len().min(k))
        .map(|pos| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    Ok(dcg / ideal)
}

/// Which split supplies relevance labels, and what gets masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    /// Rank against the test split; train (and, by default, tune)
    /// interactions are masked out of the candidate list.
    Test { mask_tune: bool },
    /// Rank against the tune split; only train interactions are masked.
    Tune,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users_evaluated: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable report")
    }
}

fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.sort_unstable();
    out.dedup();
    out
}

/// Metrics averaged over users with at least one target interaction; users
/// without targets are skipped. Per-user work fans out across threads and
/// is averaged in user order, so results do not depend on scheduling.
pub fn evaluate_all(
    model: &BuncaModel,
    graphs: &GraphSet,
    dataset: &Dataset,
    ks: &[usize],
    target: EvalTarget,
) -> Result<MetricsReport> {
    for &k in ks {
        check_k(k)?;
    }
    let reprs = model.infer_reprs(graphs)?;
    evaluate_reprs(&reprs, dataset, ks, target)
}

/// Evaluation core over precomputed representations; exposed so oracle
/// tests and benches can drive it with synthetic scores.
pub fn evaluate_reprs(
    reprs: &FinalReprs,
    dataset: &Dataset,
    ks: &[usize],
    target: EvalTarget,
) -> Result<MetricsReport> {
    let n_users = dataset.n_users;
    let per_user: Vec<Option<Vec<(f64, f64)>>> = par::run(|| {
        let eval_one = |u: usize| -> Option<Vec<(f64, f64)>> {
            let (test, masked): (Vec<usize>, Vec<usize>) = match target {
                EvalTarget::Test { mask_tune } => {
                    let test = dataset.x_test.row(u).to_vec();
                    let masked = if mask_tune {
                        merge_sorted(dataset.x_train.row(u), dataset.x_tune.row(u))
                    } else {
                        dataset.x_train.row(u).to_vec()
                    };
                    (test, masked)
                }
                EvalTarget::Tune => (
                    dataset.x_tune.row(u).to_vec(),
                    dataset.x_train.row(u).to_vec(),
                ),
            };
            if test.is_empty() {
                return None;
            }
            let ranking = rank_bundles(reprs, u, &masked).expect("user in range");
            Some(
                ks.iter()
                    .map(|&k| {
                        (
                            recall_at_k(&ranking, &test, k).expect("validated k"),
                            ndcg_at_k(&ranking, &test, k).expect("validated k"),
                        )
                    })
                    .collect(),
            )
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..n_users).into_par_iter().map(eval_one).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..n_users).map(eval_one).collect()
        }
    });

    let mut recall = vec![0.0; ks.len()];
    let mut ndcg = vec![0.0; ks.len()];
    let mut users = 0usize;
    for metrics in per_user.iter().flatten() {
        users += 1;
        for (i, &(r, n)) in metrics.iter().enumerate() {
            recall[i] += r;
            ndcg[i] += n;
        }
    }
    if users > 0 {
        for i in 0..ks.len() {
            recall[i] /= users as f64;
            ndcg[i] /= users as f64;
        }
    }
    Ok(MetricsReport {
        k: ks.to_vec(),
        recall,
        ndcg,
        users_evaluated: users,
    })
}

/// Sequential twin of [`evaluate_reprs`] for the bench suite and for
/// parity tests against the parallel path.
pub fn evaluate_reprs_seq(
    reprs: &FinalReprs,
    dataset: &Dataset,
    ks: &[usize],
    target: EvalTarget,
) -> Result<MetricsReport> {
    let mut recall = vec![0.0; ks.len()];
    let mut ndcg = vec![0.0; ks.len()];
    let mut users = 0usize;
    for u in 0..dataset.n_users {
        let (test, masked): (Vec<usize>, Vec<usize>) = match target {
            EvalTarget::Test { mask_tune } => {
                let test = dataset.x_test.row(u).to_vec();
                let masked = if mask_tune {
                    merge_sorted(dataset.x_train.row(u), dataset.x_tune.row(u))
                } else {
                    dataset.x_train.row(u).to_vec()
                };
                (test, masked)
            }
            EvalTarget::Tune => (
                dataset.x_tune.row(u).to_vec(),
                dataset.x_train.row(u).to_vec(),
            ),
        };
        if test.is_empty() {
            continue;
        }
        let ranking = rank_bundles(reprs, u, &masked)?;
        users += 1;
        for (i, &k) in ks.iter().enumerate() {
            recall[i] += recall_at_k(&ranking, &test, k)?;
            ndcg[i] += ndcg_at_k(&ranking, &test, k)?;
        }
    }
    if users > 0 {
        for i in 0..ks.len() {
            recall[i] /= users as f64;
            ndcg[i] /= users as f64;
        }
    }
    Ok(MetricsReport {
        k: ks.to_vec(),
        recall,
        ndcg,
        users_evaluated: users,
    })
}
