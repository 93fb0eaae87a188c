//! Line-based `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys are rejected.
//! Dumping then re-parsing reproduces the effective configuration exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bunca::train::TrainConfig;

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub dataset_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
}

pub fn parse_ks(value: &str) -> Result<Vec<usize>, String> {
    let ks: Result<Vec<usize>, _> = value
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect();
    match ks {
        Ok(v) if !v.is_empty() && v.iter().all(|&k| k > 0) => Ok(v),
        _ => Err(format!("ks must be a comma-separated list of positive integers, got {value:?}")),
    }
}

fn apply(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
        value
            .parse::<T>()
            .map_err(|_| format!("invalid value for {key}: {value:?}"))
    }
    match key {
        "dataset_dir" => cfg.dataset_dir = Some(PathBuf::from(value)),
        "out_dir" => cfg.out_dir = Some(PathBuf::from(value)),
        "d" => cfg.train.d = num(key, value)?,
        "H" => cfg.train.h = num(key, value)?,
        "H_sub" => cfg.train.h_sub = num(key, value)?,
        "L" => cfg.train.l = num(key, value)?,
        "alpha" => cfg.train.alpha = num(key, value)?,
        "beta" => cfg.train.beta = num(key, value)?,
        "gamma" => cfg.train.gamma = num(key, value)?,
        "mu" => cfg.train.mu = num(key, value)?,
        "tau" => cfg.train.tau = num(key, value)?,
        "lambda1" => cfg.train.lambda1 = num(key, value)?,
        "lambda2" => cfg.train.lambda2 = num(key, value)?,
        "lr" => cfg.train.lr = num(key, value)?,
        "batch_size" => cfg.train.batch_size = num(key, value)?,
        "epochs" => cfg.train.epochs = num(key, value)?,
        "eval_every" => cfg.train.eval_every = num(key, value)?,
        "patience" => cfg.train.patience = num(key, value)?,
        "seed" => cfg.train.seed = num(key, value)?,
        "theta_up" => cfg.train.theta_up = num(key, value)?,
        "theta_bc" => cfg.train.theta_bc = num(key, value)?,
        "ks" => cfg.train.ks = parse_ks(value)?,
        other => return Err(format!("unknown config key {other:?}")),
    }
    Ok(())
}

pub fn parse_config_text(text: &str, origin: &Path) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!(
                "{}:{}: expected `key = value`, got {line:?}",
                origin.display(),
                lineno + 1
            ));
        };
        apply(&mut cfg, key.trim(), value.trim())
            .map_err(|e| format!("{}:{}: {e}", origin.display(), lineno + 1))?;
    }
    Ok(cfg)
}

pub fn load_config_file(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse_config_text(&text, path)
}

/// Serialize the effective configuration; parsing the dump reproduces it.
pub fn dump_config(cfg: &RunConfig) -> String {
    let t = &cfg.train;
    let mut out = String::new();
    if let Some(d) = &cfg.dataset_dir {
        let _ = writeln!(out, "dataset_dir = {}", d.display());
    }
    if let Some(d) = &cfg.out_dir {
        let _ = writeln!(out, "out_dir = {}", d.display());
    }
    let _ = writeln!(out, "d = {}", t.d);
    let _ = writeln!(out, "H = {}", t.h);
    let _ = writeln!(out, "H_sub = {}", t.h_sub);
    let _ = writeln!(out, "L = {}", t.l);
    let _ = writeln!(out, "alpha = {}", t.alpha);
    let _ = writeln!(out, "beta = {}", t.beta);
    let _ = writeln!(out, "gamma = {}", t.gamma);
    let _ = writeln!(out, "mu = {}", t.mu);
    let _ = writeln!(out, "tau = {}", t.tau);
    let _ = writeln!(out, "lambda1 = {}", t.lambda1);
    let _ = writeln!(out, "lambda2 = {}", t.lambda2);
    let _ = writeln!(out, "lr = {}", t.lr);
    let _ = writeln!(out, "batch_size = {}", t.batch_size);
    let _ = writeln!(out, "epochs = {}", t.epochs);
    let _ = writeln!(out, "eval_every = {}", t.eval_every);
    let _ = writeln!(out, "patience = {}", t.patience);
    let _ = writeln!(out, "seed = {}", t.seed);
    let _ = writeln!(out, "theta_up = {}", t.theta_up);
    let _ = writeln!(out, "theta_bc = {}", t.theta_bc);
    let _ = writeln!(
        out,
        "ks = {}",
        t.ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let mut cfg = RunConfig::default();
        cfg.dataset_dir = Some(PathBuf::from("/tmp/data"));
        cfg.out_dir = Some(PathBuf::from("/tmp/out"));
        cfg.train.lr = 0.003;
        cfg.train.ks = vec![5, 10, 20];
        cfg.train.h = 3;
        let dump = dump_config(&cfg);
        let back = parse_config_text(&dump, Path::new("dump")).unwrap();
        assert_eq!(dump, dump_config(&back));
    }

    #[test]
    fn rejects_unknown_key() {
        let err = parse_config_text("warp_factor = 9\n", Path::new("cfg")).unwrap_err();
        assert!(err.contains("warp_factor"));
        assert!(err.contains("cfg:1"));
    }

    #[test]
    fn rejects_bad_value() {
        let err = parse_config_text("lr = fast\n", Path::new("cfg")).unwrap_err();
        assert!(err.contains("lr"));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = parse_config_text("# a comment\n\nlr = 0.01\n", Path::new("cfg")).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
    }

    #[test]
    fn ks_parsing() {
        assert_eq!(parse_ks("10,20").unwrap(), vec![10, 20]);
        assert_eq!(parse_ks("5").unwrap(), vec![5]);
        assert!(parse_ks("").is_err());
        assert!(parse_ks("0,5").is_err());
        assert!(parse_ks("a,b").is_err());
    }
}
