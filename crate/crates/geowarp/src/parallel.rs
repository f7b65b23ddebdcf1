//! Row-parallel execution helper.
//!
//! With the `parallel` feature the per-row closures run on the rayon pool;
//! without it they run sequentially. Results are collected in row order and
//! combined sequentially by the callers, so the output is bit-identical in
//! both modes regardless of partitioning.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to every row index in `0..rows`, collecting results in order.
pub(crate) fn map_rows<T, F>(rows: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..rows).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..rows).map(f).collect()
    }
}
