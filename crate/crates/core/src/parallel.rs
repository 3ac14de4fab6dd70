//! Thin dispatch layer over rayon.
//!
//! Every parallel entry point here is written so the result is bit-identical
//! for any thread count: work is split along fixed index boundaries and each
//! output slot is produced by exactly one fixed-order computation. Reductions
//! that would depend on scheduling are expressed as ordered merges of
//! per-index partials instead.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `0..n` to a vector, preserving index order.
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

/// Fill disjoint row chunks of `out` in place; `f(row, chunk)` writes one row.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(row_len > 0 && out.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(row_len).enumerate().for_each(|(i, chunk)| f(i, chunk));
    }
}
