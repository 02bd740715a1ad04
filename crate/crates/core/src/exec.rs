//! Data-parallel map with a sequential fallback.
//!
//! Results always come back in index order, so reductions over them are
//! deterministic whichever path runs.

/// Whether the rayon path is compiled in.
pub const PARALLEL: bool = cfg!(feature = "parallel");

/// `(0..n).map(f).collect()`, in parallel when the `parallel` feature is on.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Like [`map_indexed`] but with at most `workers` threads.
pub fn map_indexed_with_workers<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>, String>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(pool.install(|| map_indexed(n, f)))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        Ok(map_indexed(n, f))
    }
}

/// Sequential version, always available (used by benchmarks and tests).
pub fn map_indexed_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
