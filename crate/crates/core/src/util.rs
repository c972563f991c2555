//! Small shared helpers.

use rayon::prelude::*;

use crate::error::Result;

/// Maps `f` over `0..n`, optionally on a local rayon pool. Results come back
/// in index order, so reductions over them are bit-identical regardless of
/// `threads`; `threads <= 1` runs inline on the caller's thread.
pub fn indexed_map<T, F>(n: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.min(n))
        .build()
        .expect("thread pool construction only fails on exotic platforms");
    pool.install(|| (0..n).into_par_iter().map(|i| f(i)).collect())
}
