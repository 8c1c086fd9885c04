//! Data-parallel map with a sequential fallback.
//!
//! Results always come back in index order, so any reduction over them is
//! independent of scheduling and thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "SIMPLR_THREADS";

/// Sizes the global pool from `SIMPLR_THREADS` if set. Later calls, or a
/// pool already built elsewhere, are left alone.
pub fn init_from_env() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// `(0..n).map(f)` evaluated across the pool.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Always sequential; the baseline the parallel path is benchmarked against.
pub fn map_indexed_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
