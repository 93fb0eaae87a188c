//! Dataset loading, statistics, synthetic benchmark generation, and the
//! causation-edge export.
//!
//! The on-disk layout is the common three-file bundle convention: five
//! tab-separated pair files (`user_bundle_{train,tune,test}.txt`,
//! `user_item.txt`, `bundle_item.txt`) with 0-based decimal ids, plus an
//! optional `counts.txt` declaring entity counts.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::coherent::{causation_matrix, prospect_scores};
use crate::error::{Error, Result};
use crate::sparse::SparseBinaryMatrix;
use crate::train::BuncaModel;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub n_users: usize,
    pub n_bundles: usize,
    pub n_items: usize,
    pub x_train: SparseBinaryMatrix,
    pub x_tune: SparseBinaryMatrix,
    pub x_test: SparseBinaryMatrix,
    /// User–item interactions (Y).
    pub user_items: SparseBinaryMatrix,
    /// Bundle–item affiliations (Z).
    pub bundle_items: SparseBinaryMatrix,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub duplicate_lines: usize,
    pub warnings: Vec<String>,
}

fn parse_pair_file(path: &Path, duplicates: &mut usize) -> Result<Vec<(usize, usize)>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let parse = |field: Option<&str>, lineno: usize| -> Result<usize> {
            field
                .and_then(|f| f.parse::<usize>().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected `left<TAB>right` with decimal ids, got {line:?}"),
                })
        };
        let left = parse(fields.next(), lineno)?;
        let right = parse(fields.next(), lineno)?;
        if fields.next().is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "trailing fields after the id pair".into(),
            });
        }
        pairs.push((left, right));
    }
    let before = pairs.len();
    pairs.sort_unstable();
    pairs.dedup();
    *duplicates += before - pairs.len();
    Ok(pairs)
}

fn parse_counts(path: &Path) -> Result<(usize, usize, usize)> {
    let text = std::fs::read_to_string(path)?;
    let mut users = None;
    let mut bundles = None;
    let mut items = None;
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("");
        let value: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected `<name> <count>`, got {line:?}"),
            })?;
        match key {
            "users" => users = Some(value),
            "bundles" => bundles = Some(value),
            "items" => items = Some(value),
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("unknown count key {other:?}"),
                })
            }
        }
    }
    match (users, bundles, items) {
        (Some(u), Some(b), Some(i)) => Ok((u, b, i)),
        _ => Err(Error::Data(format!(
            "{}: must declare users, bundles and items",
            path.display()
        ))),
    }
}

fn check_ids(
    pairs: &[(usize, usize)],
    n_left: usize,
    n_right: usize,
    file: &str,
) -> Result<()> {
    for &(l, r) in pairs {
        if l >= n_left || r >= n_right {
            return Err(Error::Data(format!(
                "{file}: id pair ({l},{r}) outside declared counts {n_left}x{n_right}"
            )));
        }
    }
    Ok(())
}

/// Load the five-file layout from `dir`. Duplicate lines collapse to one
/// stored entry (reported), malformed lines fail with file and line number,
/// and overlapping split pairs are rejected.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, LoadReport)> {
    let mut report = LoadReport::default();
    let mut dup = 0usize;
    let train = parse_pair_file(&dir.join("user_bundle_train.txt"), &mut dup)?;
    let tune = parse_pair_file(&dir.join("user_bundle_tune.txt"), &mut dup)?;
    let test = parse_pair_file(&dir.join("user_bundle_test.txt"), &mut dup)?;
    let ui = parse_pair_file(&dir.join("user_item.txt"), &mut dup)?;
    let bi = parse_pair_file(&dir.join("bundle_item.txt"), &mut dup)?;
    report.duplicate_lines = dup;

    let counts_path = dir.join("counts.txt");
    let (n_users, n_bundles, n_items) = if counts_path.exists() {
        parse_counts(&counts_path)?
    } else {
        let max_plus_one = |iter: &mut dyn Iterator<Item = usize>| iter.max().map_or(0, |m| m + 1);
        let nu = max_plus_one(
            &mut train
                .iter()
                .chain(&tune)
                .chain(&test)
                .map(|&(u, _)| u)
                .chain(ui.iter().map(|&(u, _)| u)),
        );
        let nb = max_plus_one(
            &mut train
                .iter()
                .chain(&tune)
                .chain(&test)
                .map(|&(_, b)| b)
                .chain(bi.iter().map(|&(b, _)| b)),
        );
        let ni = max_plus_one(&mut ui.iter().chain(&bi).map(|&(_, i)| i));
        (nu, nb, ni)
    };

    check_ids(&train, n_users, n_bundles, "user_bundle_train.txt")?;
    check_ids(&tune, n_users, n_bundles, "user_bundle_tune.txt")?;
    check_ids(&test, n_users, n_bundles, "user_bundle_test.txt")?;
    check_ids(&ui, n_users, n_items, "user_item.txt")?;
    check_ids(&bi, n_bundles, n_items, "bundle_item.txt")?;

    let train_set: BTreeSet<_> = train.iter().copied().collect();
    let tune_set: BTreeSet<_> = tune.iter().copied().collect();
    for &(u, b) in &tune {
        if train_set.contains(&(u, b)) {
            return Err(Error::Data(format!("pair ({u},{b}) appears in both train and tune splits")));
        }
    }
    for &(u, b) in &test {
        if train_set.contains(&(u, b)) || tune_set.contains(&(u, b)) {
            return Err(Error::Data(format!("pair ({u},{b}) appears in multiple splits")));
        }
    }

    let ds = Dataset {
        name: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        n_users,
        n_bundles,
        n_items,
        x_train: SparseBinaryMatrix::from_pairs(n_users, n_bundles, &train),
        x_tune: SparseBinaryMatrix::from_pairs(n_users, n_bundles, &tune),
        x_test: SparseBinaryMatrix::from_pairs(n_users, n_bundles, &test),
        user_items: SparseBinaryMatrix::from_pairs(n_users, n_items, &ui),
        bundle_items: SparseBinaryMatrix::from_pairs(n_bundles, n_items, &bi),
    };

    let mut touched_bundles: BTreeSet<usize> = BTreeSet::new();
    for &(_, b) in train.iter().chain(&tune).chain(&test) {
        touched_bundles.insert(b);
    }
    for &b in &touched_bundles {
        if ds.bundle_items.row(b).is_empty() {
            report
                .warnings
                .push(format!("bundle {b} appears in a split but has no items"));
        }
    }
    Ok((ds, report))
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub bundles: usize,
    pub items: usize,
    /// |E_UI|: stored user–item interactions.
    pub ui_interactions: usize,
    /// |E_UB|: user–bundle interactions summed over all three splits.
    pub ub_interactions: usize,
    /// Average items per bundle over all declared bundles.
    pub avg_items_per_bundle: f64,
}

pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    DatasetStats {
        users: ds.n_users,
        bundles: ds.n_bundles,
        items: ds.n_items,
        ui_interactions: ds.user_items.nnz(),
        ub_interactions: ds.x_train.nnz() + ds.x_tune.nnz() + ds.x_test.nnz(),
        avg_items_per_bundle: ds.bundle_items.nnz() as f64 / ds.n_bundles as f64,
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct HighInfluenceReport {
    /// histogram[k] = number of bundles with exactly k high-influence items.
    pub histogram: Vec<usize>,
    pub bundles_counted: usize,
    pub empty_bundles_skipped: usize,
}

/// Distribution of per-bundle high-influence item counts. An item is
/// high-influence in a bundle when its user-interaction count strictly
/// exceeds the mean over the bundle's items.
pub fn high_influence_distribution(ds: &Dataset) -> HighInfluenceReport {
    let mut popularity = vec![0usize; ds.n_items];
    for (_, i) in ds.user_items.iter_entries() {
        popularity[i] += 1;
    }
    let mut counts = Vec::with_capacity(ds.n_bundles);
    let mut skipped = 0usize;
    for b in 0..ds.n_bundles {
        let items = ds.bundle_items.row(b);
        if items.is_empty() {
            skipped += 1;
            continue;
        }
        let mean = items.iter().map(|&i| popularity[i] as f64).sum::<f64>() / items.len() as f64;
        counts.push(items.iter().filter(|&&i| popularity[i] as f64 > mean).count());
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut histogram = vec![0usize; max + 1];
    for c in &counts {
        histogram[*c] += 1;
    }
    HighInfluenceReport {
        histogram,
        bundles_counted: counts.len(),
        empty_bundles_skipped: skipped,
    }
}

/// Shape of a planted-structure synthetic dataset.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub groups: usize,
    pub users_per_group: usize,
    pub bundles_per_group: usize,
    pub items_per_group: usize,
    /// Probability that an induced user–item interaction is rewired to a
    /// uniformly random item of another group. Ignored with a single group.
    pub noise_rate: f64,
    pub seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.groups == 0
            || self.users_per_group == 0
            || self.bundles_per_group < 2
            || self.items_per_group < 2
        {
            return Err(Error::Config(
                "synthetic spec needs >=1 group, >=1 user/group, >=2 bundles/group, >=2 items/group".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config("noise rate must be in [0,1)".into()));
        }
        Ok(())
    }
}

fn write_pairs(path: &Path, pairs: &[(usize, usize)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for &(l, r) in pairs {
        writeln!(w, "{l}\t{r}")?;
    }
    w.flush()?;
    Ok(())
}

struct SynthPairs {
    train: Vec<(usize, usize)>,
    tune: Vec<(usize, usize)>,
    test: Vec<(usize, usize)>,
    user_items: Vec<(usize, usize)>,
    bundle_items: Vec<(usize, usize)>,
}

/// Build a block-structured dataset in memory.
///
/// Each bundle holds 2–4 same-group items; each user interacts with ~60% of
/// the same-group bundles split 70/10/20 into train/tune/test with at least
/// one train and one test interaction; user–item interactions are induced
/// from interacted bundles' items, each rewired cross-group with probability
/// `noise_rate`. Deterministic for a fixed spec.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    let (ds, _) = synth_build(spec, "synthetic")?;
    Ok(ds)
}

/// The fixed 6-user/5-bundle/8-item instance used by built-in gradient
/// checks and smoke tests.
pub fn toy_dataset() -> Dataset {
    synth_dataset(&SynthSpec {
        groups: 1,
        users_per_group: 6,
        bundles_per_group: 5,
        items_per_group: 8,
        noise_rate: 0.0,
        seed: 23,
    })
    .expect("valid fixed spec")
}

fn synth_build(spec: &SynthSpec, name: &str) -> Result<(Dataset, SynthPairs)> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let n_users = spec.groups * spec.users_per_group;
    let n_bundles = spec.groups * spec.bundles_per_group;
    let n_items = spec.groups * spec.items_per_group;

    // bundle contents
    let mut bi: Vec<(usize, usize)> = Vec::new();
    for b in 0..n_bundles {
        let group = b / spec.bundles_per_group;
        let base = group * spec.items_per_group;
        let size = rng.gen_range(2..=4.min(spec.items_per_group));
        let mut picked = sample(&mut rng, spec.items_per_group, size).into_vec();
        picked.sort_unstable();
        for i in picked {
            bi.push((b, base + i));
        }
    }
    let bundle_items = SparseBinaryMatrix::from_pairs(n_bundles, n_items, &bi);

    let per_user = ((spec.bundles_per_group as f64) * 0.6).round().max(2.0) as usize;
    let n_test = ((per_user as f64) * 0.2).round().max(1.0) as usize;
    let n_tune = ((per_user as f64) * 0.1).round() as usize;
    if per_user > spec.bundles_per_group || n_test + n_tune + 1 > per_user {
        return Err(Error::Config(format!(
            "spec too small to satisfy the 70/10/20 split: {per_user} interactions per user"
        )));
    }
    let n_train = per_user - n_test - n_tune;

    let mut train = Vec::new();
    let mut tune = Vec::new();
    let mut test = Vec::new();
    let mut ui_pairs: Vec<(usize, usize)> = Vec::new();

    for u in 0..n_users {
        let group = u / spec.users_per_group;
        let bundle_base = group * spec.bundles_per_group;
        let mut chosen = sample(&mut rng, spec.bundles_per_group, per_user).into_vec();
        // shuffle so split membership is random, then assign contiguously
        for k in (1..chosen.len()).rev() {
            let j = rng.gen_range(0..=k);
            chosen.swap(k, j);
        }
        for (slot, &local) in chosen.iter().enumerate() {
            let b = bundle_base + local;
            if slot < n_train {
                train.push((u, b));
            } else if slot < n_train + n_tune {
                tune.push((u, b));
            } else {
                test.push((u, b));
            }
        }

        // induced item interactions from every interacted bundle
        let mut items: BTreeSet<usize> = BTreeSet::new();
        for &local in &chosen {
            for &i in bundle_items.row(bundle_base + local) {
                items.insert(i);
            }
        }
        let item_group_base = group * spec.items_per_group;
        let item_group_end = item_group_base + spec.items_per_group;
        let mut final_items: BTreeSet<usize> = BTreeSet::new();
        for &i in &items {
            if spec.groups > 1 && rng.gen_range(0.0..1.0) < spec.noise_rate {
                loop {
                    let cand = rng.gen_range(0..n_items);
                    let cross = cand < item_group_base || cand >= item_group_end;
                    if cross && !final_items.contains(&cand) && !items.contains(&cand) {
                        final_items.insert(cand);
                        break;
                    }
                }
            } else {
                final_items.insert(i);
            }
        }
        for i in final_items {
            ui_pairs.push((u, i));
        }
    }

    train.sort_unstable();
    tune.sort_unstable();
    test.sort_unstable();
    ui_pairs.sort_unstable();

    let ds = Dataset {
        name: name.to_string(),
        n_users,
        n_bundles,
        n_items,
        x_train: SparseBinaryMatrix::from_pairs(n_users, n_bundles, &train),
        x_tune: SparseBinaryMatrix::from_pairs(n_users, n_bundles, &tune),
        x_test: SparseBinaryMatrix::from_pairs(n_users, n_bundles, &test),
        user_items: SparseBinaryMatrix::from_pairs(n_users, n_items, &ui_pairs),
        bundle_items,
    };
    Ok((
        ds,
        SynthPairs {
            train,
            tune,
            test,
            user_items: ui_pairs,
            bundle_items: bi,
        },
    ))
}

/// [`synth_dataset`], additionally written to `dir` in the on-disk layout.
/// Byte-identical files for a fixed spec.
pub fn synth_generate(spec: &SynthSpec, dir: &Path) -> Result<Dataset> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "synthetic".into());
    let (ds, pairs) = synth_build(spec, &name)?;
    std::fs::create_dir_all(dir)?;

    write_pairs(&dir.join("user_bundle_train.txt"), &pairs.train)?;
    write_pairs(&dir.join("user_bundle_tune.txt"), &pairs.tune)?;
    write_pairs(&dir.join("user_bundle_test.txt"), &pairs.test)?;
    write_pairs(&dir.join("user_item.txt"), &pairs.user_items)?;
    write_pairs(&dir.join("bundle_item.txt"), &pairs.bundle_items)?;
    let mut w = BufWriter::new(std::fs::File::create(dir.join("counts.txt"))?);
    writeln!(w, "users {}", ds.n_users)?;
    writeln!(w, "bundles {}", ds.n_bundles)?;
    writeln!(w, "items {}", ds.n_items)?;
    w.flush()?;
    Ok(ds)
}

/// Recompute both sub-views' causation matrices from trained parameters and
/// write, per destination item and prospect, the `top_n` strongest incoming
/// edges as `prospect<TAB>src<TAB>dst<TAB>weight`, with a trailing `high`
/// field on edges of weight >= 0.5.
pub fn export_causation(
    model: &BuncaModel,
    ds: &Dataset,
    top_n: usize,
    out: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(out)?);
    for view in ["up", "bc"] {
        let mask = model.causation_mask(ds, view)?;
        if mask.n_edges() == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let items = tape.constant(model.params.get("item_embed").expect("item_embed").value.clone());
        let mpc = model.mpc_constants(&mut tape, view);
        let scored = prospect_scores(&mut tape, items, &mpc, &mask, crate::coherent::LEAKY_SLOPE)?;
        for (l, &score_node) in scored.scores.iter().enumerate() {
            let a = causation_matrix(&mut tape, score_node, &mask, crate::coherent::CAUSATION_EPS);
            let weights = tape.value(a);
            for dst in 0..mask.csr.n_rows {
                let lo = mask.csr.row_offsets[dst];
                let hi = mask.csr.row_offsets[dst + 1];
                if lo == hi {
                    continue;
                }
                let mut edges: Vec<(usize, f64)> = (lo..hi)
                    .map(|e| (mask.csr.col_indices[e], weights.data[e]))
                    .collect();
                edges.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                for &(src, weight) in edges.iter().take(top_n) {
                    if weight >= 0.5 {
                        writeln!(w, "{view}{l}\t{src}\t{dst}\t{weight}\thigh")?;
                    } else {
                        writeln!(w, "{view}{l}\t{src}\t{dst}\t{weight}")?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, files: &[(&str, &str)]) {
        for (name, content) in files {
            std::fs::write(dir.join(name), content).unwrap();
        }
    }

    const MINIMAL: [(&str, &str); 5] = [
        ("user_bundle_train.txt", "0\t0\n1\t1\n"),
        ("user_bundle_tune.txt", "0\t1\n"),
        ("user_bundle_test.txt", "1\t0\n"),
        ("user_item.txt", "0\t0\n0\t1\n1\t2\n"),
        ("bundle_item.txt", "0\t0\n0\t1\n1\t2\n1\t0\n"),
    ];

    #[test]
    fn loads_minimal_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &MINIMAL);
        let (ds, report) = load_dataset(dir.path()).unwrap();
        assert_eq!((ds.n_users, ds.n_bundles, ds.n_items), (2, 2, 3));
        assert_eq!(ds.x_train.nnz(), 2);
        assert_eq!(ds.user_items.nnz(), 3);
        assert_eq!(report.duplicate_lines, 0);
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn duplicate_lines_collapse_with_warning_count() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &MINIMAL);
        std::fs::write(dir.path().join("user_bundle_train.txt"), "0\t0\n0\t0\n1\t1\n").unwrap();
        let (ds, report) = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.x_train.nnz(), 2);
        assert_eq!(report.duplicate_lines, 1);
    }

    #[test]
    fn space_separator_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &MINIMAL);
        std::fs::write(dir.path().join("user_item.txt"), "0\t0\n3 7\n").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn id_beyond_declared_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &MINIMAL);
        std::fs::write(dir.path().join("counts.txt"), "users 2\nbundles 2\nitems 2\n").unwrap();
        // item 2 exceeds the declared 2 items
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &MINIMAL);
        std::fs::write(dir.path().join("user_bundle_test.txt"), "0\t0\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn bundle_without_items_warns() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &MINIMAL);
        std::fs::write(dir.path().join("bundle_item.txt"), "0\t0\n").unwrap();
        let (_, report) = load_dataset(dir.path()).unwrap();
        assert!(report.warnings.iter().any(|w| w.contains("bundle 1")));
    }

    #[test]
    fn stats_on_handmade_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &MINIMAL);
        std::fs::write(
            dir.path().join("bundle_item.txt"),
            "0\t0\n0\t1\n0\t2\n1\t0\n1\t1\n1\t2\n",
        )
        .unwrap();
        let (ds, _) = load_dataset(dir.path()).unwrap();
        let stats = dataset_stats(&ds);
        assert_eq!(stats.avg_items_per_bundle, 3.0);
        assert_eq!(stats.ub_interactions, 4);
        assert_eq!(stats.ui_interactions, 3);
    }

    #[test]
    fn high_influence_all_equal_popularity() {
        // both items of bundle 0 interacted once -> no strict exceedance
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &MINIMAL);
        std::fs::write(dir.path().join("user_item.txt"), "0\t0\n1\t1\n").unwrap();
        std::fs::write(dir.path().join("bundle_item.txt"), "0\t0\n0\t1\n1\t0\n").unwrap();
        let (ds, _) = load_dataset(dir.path()).unwrap();
        let report = high_influence_distribution(&ds);
        assert_eq!(report.histogram[0], 2);
        assert_eq!(report.histogram.len(), 1);
    }

    #[test]
    fn high_influence_single_anchor() {
        // popularities (10, 1, 1): mean 4, exactly one item above it
        let mut ui = String::new();
        for u in 0..10 {
            ui.push_str(&format!("{u}\t0\n"));
        }
        ui.push_str("0\t1\n1\t2\n");
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &MINIMAL);
        std::fs::write(dir.path().join("counts.txt"), "users 10\nbundles 2\nitems 3\n").unwrap();
        std::fs::write(dir.path().join("user_bundle_train.txt"), "0\t0\n").unwrap();
        std::fs::write(dir.path().join("user_bundle_tune.txt"), "").unwrap();
        std::fs::write(dir.path().join("user_bundle_test.txt"), "1\t0\n").unwrap();
        std::fs::write(dir.path().join("user_item.txt"), ui).unwrap();
        std::fs::write(dir.path().join("bundle_item.txt"), "0\t0\n0\t1\n0\t2\n1\t0\n").unwrap();
        let (ds, _) = load_dataset(dir.path()).unwrap();
        let report = high_influence_distribution(&ds);
        // bundle 0 (popularities 10,1,1) has one anchor; bundle 1's single
        // item equals its own mean, so none
        assert_eq!(report.histogram, vec![1, 1]);
    }

    #[test]
    fn empty_bundle_excluded_from_histogram() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &MINIMAL);
        std::fs::write(dir.path().join("counts.txt"), "users 2\nbundles 3\nitems 3\n").unwrap();
        let (ds, _) = load_dataset(dir.path()).unwrap();
        let report = high_influence_distribution(&ds);
        assert_eq!(report.empty_bundles_skipped, 1);
        assert_eq!(report.bundles_counted, 2);
    }

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            groups: 4,
            users_per_group: 12,
            bundles_per_group: 8,
            items_per_group: 10,
            noise_rate: 0.05,
            seed,
        }
    }

    #[test]
    fn synth_is_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synth_generate(&small_spec(7), d1.path()).unwrap();
        synth_generate(&small_spec(7), d2.path()).unwrap();
        for name in [
            "user_bundle_train.txt",
            "user_bundle_tune.txt",
            "user_bundle_test.txt",
            "user_item.txt",
            "bundle_item.txt",
            "counts.txt",
        ] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between equal-seed runs");
        }
    }

    #[test]
    fn synth_roundtrips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let generated = synth_generate(&small_spec(3), dir.path()).unwrap();
        let (loaded, report) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.n_users, generated.n_users);
        assert_eq!(loaded.x_train, generated.x_train);
        assert_eq!(loaded.x_tune, generated.x_tune);
        assert_eq!(loaded.x_test, generated.x_test);
        assert_eq!(loaded.user_items, generated.user_items);
        assert_eq!(loaded.bundle_items, generated.bundle_items);
        assert_eq!(report.duplicate_lines, 0);
        let stats = dataset_stats(&loaded);
        assert_eq!(stats.users, 48);
        assert_eq!(stats.bundles, 32);
        assert_eq!(stats.items, 40);
    }

    #[test]
    fn synth_splits_partition_interactions() {
        let ds = synth_dataset(&small_spec(5)).unwrap();
        for u in 0..ds.n_users {
            assert!(!ds.x_test.row(u).is_empty(), "user {u} lacks a test bundle");
            assert!(!ds.x_train.row(u).is_empty(), "user {u} lacks a train bundle");
            for &b in ds.x_train.row(u) {
                assert!(!ds.x_tune.contains(u, b) && !ds.x_test.contains(u, b));
            }
            for &b in ds.x_tune.row(u) {
                assert!(!ds.x_test.contains(u, b));
            }
        }
    }

    #[test]
    fn synth_noise_fraction_within_three_sigma() {
        let spec = small_spec(11);
        let ds = synth_dataset(&spec).unwrap();
        let group_of_item = |i: usize| i / spec.items_per_group;
        let group_of_user = |u: usize| u / spec.users_per_group;
        let mut cross = 0usize;
        let mut total = 0usize;
        for (u, i) in ds.user_items.iter_entries() {
            total += 1;
            if group_of_item(i) != group_of_user(u) {
                cross += 1;
            }
        }
        let n = total as f64;
        let p = spec.noise_rate;
        let sigma = (n * p * (1.0 - p)).sqrt();
        let expected = n * p;
        assert!(
            (cross as f64 - expected).abs() <= 3.0 * sigma,
            "cross-group count {cross} outside {expected} ± 3·{sigma:.2}"
        );
    }

    #[test]
    fn synth_single_group_has_no_cross_noise() {
        let ds = synth_dataset(&SynthSpec {
            groups: 1,
            users_per_group: 6,
            bundles_per_group: 5,
            items_per_group: 8,
            noise_rate: 0.3,
            seed: 1,
        })
        .unwrap();
        assert_eq!(ds.n_items, 8);
        assert!(ds.user_items.nnz() > 0);
    }

    #[test]
    fn synth_rejects_undersized_spec() {
        let bad = SynthSpec {
            groups: 1,
            users_per_group: 1,
            bundles_per_group: 1,
            items_per_group: 1,
            noise_rate: 0.0,
            seed: 0,
        };
        assert!(synth_dataset(&bad).is_err());
    }

    #[test]
    fn toy_dataset_shape() {
        let ds = toy_dataset();
        assert_eq!((ds.n_users, ds.n_bundles, ds.n_items), (6, 5, 8));
        assert!(ds.x_train.nnz() > 0);
        assert!(ds.x_test.nnz() > 0);
    }
}
