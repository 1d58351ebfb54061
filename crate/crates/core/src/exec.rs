//! Feature-selected execution of independent work items.
//!
//! With the `parallel` feature (default) the map runs on the rayon pool;
//! without it the same closure runs on a plain sequential iterator. Results
//! come back in index order either way, so downstream reductions are
//! deterministic regardless of thread scheduling.

#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
