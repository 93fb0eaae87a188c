//! `bunca` — train, evaluate, and inspect the bundle recommender.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical divergence or failed gradient check.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bunca::data::{
    dataset_stats, export_causation, high_influence_distribution, load_dataset, synth_generate,
    toy_dataset, SynthSpec,
};
use bunca::eval::{evaluate_all, rank_bundles, EvalTarget};
use bunca::gradcheck::GradCheckConfig;
use bunca::train::{
    fit, gradcheck_full_loss, load_checkpoint, save_checkpoint, BuncaModel, GraphSet, TrainConfig,
};
use bunca::Error;

use config::{dump_config, load_config_file, parse_ks, RunConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "bunca", version, about = "Bundle recommendation with causation-enhanced multi-view learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Dataset directory (overrides config)
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    /// Output directory (overrides config)
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Embedding dimension
    #[arg(long)]
    d: Option<usize>,
    /// Unified-graph propagation depth
    #[arg(long = "H")]
    h: Option<usize>,
    /// Sub-view propagation depth
    #[arg(long = "H-sub")]
    h_sub: Option<usize>,
    /// Causation prospects per sub-view
    #[arg(long = "L")]
    l: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    theta_up: Option<u32>,
    #[arg(long)]
    theta_bc: Option<u32>,
    /// Comma-separated top-K list, e.g. 10,20
    #[arg(long)]
    ks: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), String> {
        macro_rules! set {
            ($field:ident, $dst:expr) => {
                if let Some(v) = self.$field.clone() {
                    $dst = v;
                }
            };
        }
        if let Some(v) = &self.dataset_dir {
            cfg.dataset_dir = Some(v.clone());
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = Some(v.clone());
        }
        set!(d, cfg.train.d);
        set!(h, cfg.train.h);
        set!(h_sub, cfg.train.h_sub);
        set!(l, cfg.train.l);
        set!(alpha, cfg.train.alpha);
        set!(beta, cfg.train.beta);
        set!(gamma, cfg.train.gamma);
        set!(mu, cfg.train.mu);
        set!(tau, cfg.train.tau);
        set!(lambda1, cfg.train.lambda1);
        set!(lambda2, cfg.train.lambda2);
        set!(lr, cfg.train.lr);
        set!(batch_size, cfg.train.batch_size);
        set!(epochs, cfg.train.epochs);
        set!(eval_every, cfg.train.eval_every);
        set!(patience, cfg.train.patience);
        set!(seed, cfg.train.seed);
        set!(theta_up, cfg.train.theta_up);
        set!(theta_bc, cfg.train.theta_bc);
        if let Some(ks) = &self.ks {
            cfg.train.ks = parse_ks(ks)?;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file, writing the best checkpoint and
    /// per-epoch metrics to the output directory
    Train {
        /// `key = value` config file
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a dataset's test split
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated top-K list
        #[arg(long, default_value = "10,20")]
        ks: String,
        /// Keep tune interactions in the candidate list instead of masking
        #[arg(long)]
        include_tune_candidates: bool,
    },
    /// Print top-K recommendations for specific users
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated user ids
        #[arg(long)]
        users: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Print dataset statistics and the high-influence item distribution
    Stats {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Generate a planted-structure synthetic dataset
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        groups: usize,
        #[arg(long, default_value_t = 12)]
        users_per_group: usize,
        #[arg(long, default_value_t = 8)]
        bundles_per_group: usize,
        #[arg(long, default_value_t = 10)]
        items_per_group: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Verify analytic gradients of the full objective on a built-in
    /// 6-user/5-bundle/8-item instance
    Gradcheck {
        /// Central-difference step
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Max relative error tolerated
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Export learned causation edges for both sub-views
    ExportCausation {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Strongest incoming edges kept per item and prospect
        #[arg(long, default_value_t = 10)]
        top_n: usize,
    },
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_NUMERIC,
        Error::GradCheck(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn load_dataset_or(dir: &Path) -> Result<bunca::data::Dataset, (u8, String)> {
    let (ds, report) = load_dataset(dir).map_err(|e| (exit_for(&e), e.to_string()))?;
    if report.duplicate_lines > 0 {
        eprintln!("warning: {} duplicate lines collapsed", report.duplicate_lines);
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(ds)
}

fn load_model_for(
    checkpoint: &Path,
    dataset: &bunca::data::Dataset,
) -> Result<(BuncaModel, GraphSet), (u8, String)> {
    let model = load_checkpoint(checkpoint).map_err(|e| (exit_for(&e), e.to_string()))?;
    model
        .check_compatible(dataset)
        .map_err(|e| (EXIT_DATA, e.to_string()))?;
    let graphs = GraphSet::build(dataset, model.hypers.theta_up, model.hypers.theta_bc)
        .map_err(|e| (exit_for(&e), e.to_string()))?;
    Ok((model, graphs))
}

fn cmd_train(config_path: PathBuf, overrides: Overrides) -> ExitCode {
    let mut run = match load_config_file(&config_path) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Err(e) = overrides.apply(&mut run) {
        return fail(EXIT_CONFIG, e);
    }
    let Some(dataset_dir) = run.dataset_dir.clone() else {
        return fail(EXIT_CONFIG, "missing required config key dataset_dir");
    };
    let Some(out_dir) = run.out_dir.clone() else {
        return fail(EXIT_CONFIG, "missing required config key out_dir");
    };
    if let Err(e) = run.train.validate() {
        return fail(EXIT_CONFIG, e);
    }
    let ds = match load_dataset_or(&dataset_dir) {
        Ok(d) => d,
        Err((code, e)) => return fail(code, e),
    };
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        return fail(EXIT_DATA, e);
    }
    if let Err(e) = std::fs::write(out_dir.join("config.dump"), dump_config(&run)) {
        return fail(EXIT_DATA, e);
    }

    let result = match fit(&run.train, &ds) {
        Ok(r) => r,
        Err(e) => return fail(exit_for(&e), e),
    };
    let metrics: String = result
        .history
        .iter()
        .map(|r| r.metrics_line() + "\n")
        .collect();
    if let Err(e) = std::fs::write(out_dir.join("metrics.jsonl"), metrics) {
        return fail(EXIT_DATA, e);
    }
    for record in &result.history {
        println!("{}", record.metrics_line());
    }
    let best = BuncaModel {
        params: result.best_params,
        hypers: result.model.hypers,
    };
    let ckpt = out_dir.join("checkpoint.bin");
    if let Err(e) = save_checkpoint(&best, &ckpt) {
        return fail(EXIT_DATA, e);
    }
    eprintln!(
        "trained {} epochs{}; checkpoint written to {}",
        result.history.len(),
        if result.stopped_early { " (early stop)" } else { "" },
        ckpt.display()
    );
    ExitCode::SUCCESS
}

fn cmd_evaluate(checkpoint: PathBuf, dataset: PathBuf, ks: String, include_tune: bool) -> ExitCode {
    let ks = match parse_ks(&ks) {
        Ok(v) => v,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let ds = match load_dataset_or(&dataset) {
        Ok(d) => d,
        Err((code, e)) => return fail(code, e),
    };
    let (model, graphs) = match load_model_for(&checkpoint, &ds) {
        Ok(v) => v,
        Err((code, e)) => return fail(code, e),
    };
    let target = EvalTarget::Test {
        mask_tune: !include_tune,
    };
    match evaluate_all(&model, &graphs, &ds, &ks, target) {
        Ok(report) => {
            println!("{}", report.to_json());
            ExitCode::SUCCESS
        }
        Err(e) => fail(exit_for(&e), e),
    }
}

fn cmd_recommend(checkpoint: PathBuf, dataset: PathBuf, users: String, k: usize) -> ExitCode {
    if k == 0 {
        return fail(EXIT_CONFIG, "k must be >= 1");
    }
    let user_ids: Result<Vec<usize>, _> = users.split(',').map(|p| p.trim().parse::<usize>()).collect();
    let user_ids = match user_ids {
        Ok(v) if !v.is_empty() => v,
        _ => return fail(EXIT_CONFIG, format!("invalid user list {users:?}")),
    };
    let ds = match load_dataset_or(&dataset) {
        Ok(d) => d,
        Err((code, e)) => return fail(code, e),
    };
    let (model, graphs) = match load_model_for(&checkpoint, &ds) {
        Ok(v) => v,
        Err((code, e)) => return fail(code, e),
    };
    let reprs = match model.infer_reprs(&graphs) {
        Ok(r) => r,
        Err(e) => return fail(exit_for(&e), e),
    };
    for &u in &user_ids {
        if u >= ds.n_users {
            return fail(EXIT_DATA, format!("unknown user id {u} (dataset has {})", ds.n_users));
        }
        let mut masked: Vec<usize> = ds.x_train.row(u).to_vec();
        masked.extend_from_slice(ds.x_tune.row(u));
        masked.sort_unstable();
        masked.dedup();
        let ranking = match rank_bundles(&reprs, u, &masked) {
            Ok(r) => r,
            Err(e) => return fail(exit_for(&e), e),
        };
        let top: Vec<String> = ranking.bundles.iter().take(k).map(|b| b.to_string()).collect();
        if top.is_empty() {
            eprintln!("warning: user {u} has no unmasked bundles to recommend");
        }
        println!("{u}\t{}", top.join(","));
    }
    ExitCode::SUCCESS
}

fn cmd_stats(dataset: PathBuf) -> ExitCode {
    let ds = match load_dataset_or(&dataset) {
        Ok(d) => d,
        Err((code, e)) => return fail(code, e),
    };
    let stats = dataset_stats(&ds);
    let influence = high_influence_distribution(&ds);
    let combined = serde_json::json!({
        "stats": stats,
        "high_influence": influence,
    });
    println!("{combined}");
    ExitCode::SUCCESS
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: PathBuf,
    groups: usize,
    users_per_group: usize,
    bundles_per_group: usize,
    items_per_group: usize,
    noise: f64,
    seed: u64,
) -> ExitCode {
    let spec = SynthSpec {
        groups,
        users_per_group,
        bundles_per_group,
        items_per_group,
        noise_rate: noise,
        seed,
    };
    match synth_generate(&spec, &out) {
        Ok(ds) => {
            eprintln!(
                "wrote {} users, {} bundles, {} items to {}",
                ds.n_users,
                ds.n_bundles,
                ds.n_items,
                out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(exit_for(&e), e),
    }
}

fn cmd_gradcheck(step: f64, tol: f64) -> ExitCode {
    let ds = toy_dataset();
    let cfg = TrainConfig {
        d: 4,
        h: 2,
        h_sub: 1,
        l: 2,
        lambda1: 0.5,
        lambda2: 0.01,
        batch_size: 8,
        seed: 1234,
        ..TrainConfig::default()
    };
    let gc = GradCheckConfig {
        step,
        tol,
        max_coords_per_tensor: usize::MAX,
        ..GradCheckConfig::default()
    };
    match gradcheck_full_loss(&cfg, &ds, &gc) {
        Ok(report) => {
            println!("{report}");
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_NUMERIC)
            }
        }
        Err(e) => fail(exit_for(&e), e),
    }
}

fn cmd_export_causation(checkpoint: PathBuf, dataset: PathBuf, out: PathBuf, top_n: usize) -> ExitCode {
    let ds = match load_dataset_or(&dataset) {
        Ok(d) => d,
        Err((code, e)) => return fail(code, e),
    };
    let model = match load_checkpoint(&checkpoint) {
        Ok(m) => m,
        Err(e) => return fail(exit_for(&e), e),
    };
    if let Err(e) = model.check_compatible(&ds) {
        return fail(EXIT_DATA, e);
    }
    match export_causation(&model, &ds, top_n, &out) {
        Ok(()) => {
            eprintln!("causation edges written to {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(exit_for(&e), e),
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Train { config, overrides } => cmd_train(config, overrides),
        Command::Evaluate {
            checkpoint,
            dataset,
            ks,
            include_tune_candidates,
        } => cmd_evaluate(checkpoint, dataset, ks, include_tune_candidates),
        Command::Recommend {
            checkpoint,
            dataset,
            users,
            k,
        } => cmd_recommend(checkpoint, dataset, users, k),
        Command::Stats { dataset } => cmd_stats(dataset),
        Command::Synth {
            out,
            groups,
            users_per_group,
            bundles_per_group,
            items_per_group,
            noise,
            seed,
        } => cmd_synth(out, groups, users_per_group, bundles_per_group, items_per_group, noise, seed),
        Command::Gradcheck { step, tol } => cmd_gradcheck(step, tol),
        Command::ExportCausation {
            checkpoint,
            dataset,
            out,
            top_n,
        } => cmd_export_causation(checkpoint, dataset, out, top_n),
    }
}
