//! Thread-pool plumbing for the data-parallel kernels.
//!
//! With the `parallel` feature enabled (the default) the hot loops fan out
//! over a rayon pool. `BUNCA_THREADS` caps the pool size; unset or `0` uses
//! rayon's default. Without the feature every helper degrades to the plain
//! sequential loop, so results are identical either way: parallel regions
//! only ever split work whose outputs land in disjoint slices.

#[cfg(feature = "parallel")]
use std::sync::OnceLock;

#[cfg(feature = "parallel")]
static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

#[cfg(feature = "parallel")]
fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let n = std::env::var("BUNCA_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        if n == 0 {
            None
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .ok()
        }
    })
    .as_ref()
}

/// Run `f` inside the configured pool (or inline when capped to the default).
#[cfg(feature = "parallel")]
pub(crate) fn run<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match pool() {
        Some(p) => p.install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn run<R>(f: impl FnOnce() -> R) -> R {
    f()
}

/// Rows-per-fork threshold from an estimate of total inner work: stay
/// sequential until the fork overhead is amortized.
pub(crate) fn row_threshold(total_work: usize) -> usize {
    if total_work >= 1 << 21 {
        64
    } else {
        usize::MAX
    }
}

/// Apply `f` to each `width`-sized row of `data`, in parallel when the work
/// is large enough to amortize the fork. Row writes are disjoint, so the
/// output does not depend on scheduling.
pub(crate) fn for_each_row<F>(data: &mut [f64], width: usize, min_rows: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(width > 0 || data.is_empty());
    #[cfg(feature = "parallel")]
    {
        let rows = data.len().checked_div(width).unwrap_or(0);
        if rows >= min_rows {
            use rayon::prelude::*;
            run(|| {
                data.par_chunks_mut(width)
                    .enumerate()
                    .for_each(|(i, row)| f(i, row));
            });
            return;
        }
    }
    let _ = min_rows;
    for (i, row) in data.chunks_mut(width.max(1)).enumerate() {
        f(i, row);
    }
}

/// Fill each element of `out` from an independent per-index computation.
pub(crate) fn for_each_index<F>(out: &mut [f64], min_len: usize, f: F)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if out.len() >= min_len {
            use rayon::prelude::*;
            run(|| {
                out.par_iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
            });
            return;
        }
    }
    let _ = min_len;
    for (i, v) in out.iter_mut().enumerate() {
        *v = f(i);
    }
}
