//! Item-level data parallelism with a sequential fallback.
//!
//! Every call site maps independent items to results in index order, so the
//! parallel and sequential paths return identical (bitwise) vectors and all
//! downstream reductions stay deterministic.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R>(n: usize, f: impl Fn(usize) -> R) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Sequential variant, always available (bench comparison hook).
pub fn map_indexed_seq<R>(n: usize, f: impl Fn(usize) -> R) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Fallible map; first error (by index) wins so failures are deterministic.
#[cfg(feature = "parallel")]
pub fn try_map_indexed<R: Send, E: Send>(
    n: usize,
    f: impl Fn(usize) -> Result<R, E> + Sync + Send,
) -> Result<Vec<R>, E> {
    let results: Vec<Result<R, E>> = (0..n).into_par_iter().map(f).collect();
    results.into_iter().collect()
}

#[cfg(not(feature = "parallel"))]
pub fn try_map_indexed<R, E>(
    n: usize,
    f: impl Fn(usize) -> Result<R, E>,
) -> Result<Vec<R>, E> {
    (0..n).map(f).collect()
}
