//! Index-ordered parallel map. With the `parallel` feature disabled, or with
//! one job, everything runs on the calling thread; results are identical
//! either way because every task derives its own randomness from its index.

/// `f(0), f(1), ..., f(count - 1)` in index order.
///
/// `jobs` bounds the worker threads; `None` uses all available cores.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(count: usize, jobs: Option<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    match jobs {
        Some(0) | Some(1) => (0..count).map(f).collect(),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| (0..count).into_par_iter().map(&f).collect()),
            Err(_) => (0..count).map(f).collect(),
        },
        None => (0..count).into_par_iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(count: usize, _jobs: Option<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..count).map(f).collect()
}

/// Whether the crate was built with the rayon backend.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
