//! Ordered parallel map used for independent blocks and grid points.

use rayon::prelude::*;

/// Applies `f` to every item and returns results in input order. With
/// `threads <= 1` the work runs on the calling thread, which keeps floating
/// point results bit-identical run to run.
pub fn map_ordered<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| items.into_par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("could not start a thread pool ({e}); running sequentially");
            items.into_iter().map(f).collect()
        }
    }
}
