//! Data-parallel helpers. With the `parallel` feature (default) work is spread
//! over a rayon pool; without it, or in [`Parallelism::Sequential`] mode, the
//! same closures run in a plain loop. Results always come back in input
//! order, so reductions over them are deterministic either way.

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "BDR_NUM_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// Whether this build can actually run in parallel.
    pub fn available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Ordered map over a slice.
pub fn map<T, R, F>(mode: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode == Parallelism::Parallel && items.len() > 1 {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = mode;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Ordered map over `0..n`.
pub fn map_range<R, F>(mode: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode == Parallelism::Parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Runs `f` inside a pool sized by `BDR_NUM_THREADS` when that is set.
pub fn with_thread_cap<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        let cap = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0);
        if let Some(n) = cap {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                return pool.install(f);
            }
        }
    }
    f()
}
