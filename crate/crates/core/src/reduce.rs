//! Fixed-size chunking for parallel loops.
//!
//! Work is split into chunks whose boundaries depend only on the input
//! length, each chunk is reduced sequentially, and chunk results come back
//! in chunk order. Callers fold them left to right, so floating-point
//! results are bit-stable regardless of the rayon worker count.

use std::ops::Range;

use rayon::prelude::*;

pub(crate) const CHUNK: usize = 4096;

/// Evaluate `f` over consecutive ranges of `0..len` in parallel, returning
/// per-chunk results in order.
pub(crate) fn map_chunks<T, F>(len: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync,
{
    let chunk = chunk.max(1);
    let n_chunks = len.div_ceil(chunk);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * chunk;
            f(start..(start + chunk).min(len))
        })
        .collect()
}

/// Element-wise `acc += other`.
pub(crate) fn add_into(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}
