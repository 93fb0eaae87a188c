//! Central-difference verification of analytic gradients.
//!
//! The checker never looks inside the tape: it only needs a deterministic
//! loss evaluation and a gradient-filling closure, so it stays an
//! independent oracle for whatever backward rules produced the gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::params::ParameterSet;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step h.
    pub step: f64,
    /// Max relative error allowed.
    pub tol: f64,
    /// Tensors larger than this are checked on a random coordinate subsample.
    pub max_coords_per_tensor: usize,
    /// Relative error uses max(|analytic|, |numeric|, scale_floor) as the
    /// denominator so near-zero gradients are compared absolutely.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-6,
            max_coords_per_tensor: 128,
            scale_floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// (flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "  {:<20} coords={:<5} max_rel_err={:.3e}",
                p.name, p.coords_checked, p.max_rel_err
            )?;
        }
        write!(
            f,
            "overall max_rel_err={:.3e} tol={:.1e} => {}",
            self.max_rel_err,
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn fd_coordinate(
    params: &ParameterSet,
    value_fn: &(impl Fn(&ParameterSet) -> f64 + Sync),
    tensor_idx: usize,
    coord: usize,
    h: f64,
) -> f64 {
    let mut work = params.clone();
    let orig = work.tensor(tensor_idx).value.data[coord];
    work.tensor_mut(tensor_idx).value.data[coord] = orig + h;
    let plus = value_fn(&work);
    work.tensor_mut(tensor_idx).value.data[coord] = orig - h;
    let minus = value_fn(&work);
    (plus - minus) / (2.0 * h)
}

/// Compare analytic gradients against central finite differences.
///
/// `value_fn` must be a pure function of the parameter values; it is
/// evaluated twice at the baseline to detect non-determinism. `grad_fn`
/// fills the grad slots (typically forward + backward on a tape).
pub fn gradcheck(
    params: &mut ParameterSet,
    value_fn: impl Fn(&ParameterSet) -> f64 + Sync,
    grad_fn: impl FnOnce(&mut ParameterSet) -> f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let base1 = value_fn(params);
    let base2 = value_fn(params);
    if !base1.is_finite() {
        return Err(Error::GradCheck(format!("loss is not finite: {base1}")));
    }
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::GradCheck(format!(
            "loss function is not deterministic: {base1} vs {base2}"
        )));
    }

    params.zero_grads();
    let loss_from_grad = grad_fn(params);
    if (loss_from_grad - base1).abs() > 1e-9 * (1.0 + base1.abs()) {
        return Err(Error::GradCheck(format!(
            "gradient pass loss {loss_from_grad} disagrees with value pass {base1}"
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    let mut overall: f64 = 0.0;

    for idx in params.trainable_indices() {
        let numel = params.tensor(idx).value.numel();
        let coords: Vec<usize> = if numel <= cfg.max_coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut picked = sample(&mut rng, numel, cfg.max_coords_per_tensor).into_vec();
            picked.sort_unstable();
            picked
        };

        let analytic = params
            .tensor(idx)
            .grad
            .as_ref()
            .ok_or_else(|| {
                Error::GradCheck(format!("no gradient recorded for {}", params.name(idx)))
            })?
            .clone();

        let numeric = run_fd(params, &value_fn, idx, &coords, cfg.step);

        let mut max_rel: f64 = 0.0;
        let mut worst = None;
        for (&coord, &num) in coords.iter().zip(&numeric) {
            let ana = analytic.data[coord];
            let denom = ana.abs().max(num.abs()).max(cfg.scale_floor);
            let rel = (ana - num).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = Some((coord, ana, num));
            }
        }
        overall = overall.max(max_rel);
        reports.push(ParamReport {
            name: params.name(idx).to_string(),
            coords_checked: coords.len(),
            max_rel_err: max_rel,
            worst,
        });
    }

    Ok(GradCheckReport {
        params: reports,
        max_rel_err: overall,
        tol: cfg.tol,
    })
}

#[cfg(feature = "parallel")]
fn run_fd(
    params: &ParameterSet,
    value_fn: &(impl Fn(&ParameterSet) -> f64 + Sync),
    idx: usize,
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    use rayon::prelude::*;
    crate::par::run(|| {
        coords
            .par_iter()
            .map(|&c| fd_coordinate(params, value_fn, idx, c, h))
            .collect()
    })
}

#[cfg(not(feature = "parallel"))]
fn run_fd(
    params: &ParameterSet,
    value_fn: &(impl Fn(&ParameterSet) -> f64 + Sync),
    idx: usize,
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    coords
        .iter()
        .map(|&c| fd_coordinate(params, value_fn, idx, c, h))
        .collect()
}
