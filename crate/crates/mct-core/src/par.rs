//! Data-parallel map helper.
//!
//! Work items (per-example gradient passes, per-image generation, per-image
//! metric terms) are independent; results come back in input order so every
//! downstream reduction folds identically whether the rayon path or the
//! sequential fallback ran. Building without the `parallel` feature removes
//! rayon entirely.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when `parallel` is true and the
/// feature is compiled in. Output order always matches input order.
pub fn maybe_par_map<T, R, F>(parallel: bool, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return items.par_iter().map(&f).collect();
    }
    let _ = parallel;
    items.iter().map(f).collect()
}

/// Maps `f` over indices `0..n`, preserving order.
pub fn maybe_par_map_idx<R, F>(parallel: bool, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return (0..n).into_par_iter().map(&f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}
