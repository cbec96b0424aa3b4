//! Ordered parallel map with an explicit worker count.

use rayon::prelude::*;

/// Evaluate `f(0..n)` and return results in index order. `workers <= 1`
/// runs inline on the calling thread.
pub fn map_indexed<T, F>(workers: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}); running sequentially");
            (0..n).map(f).collect()
        }
    }
}
