//! Deterministic parallel reductions.
//!
//! Scatter-type loops (P2G, force assembly) and global sums are parallelized
//! by splitting the input into fixed-size chunks, producing one partial
//! result per chunk in parallel, then combining the partials sequentially in
//! chunk order. Floating-point addition order is therefore independent of
//! thread count, which keeps runs bitwise reproducible.

use rayon::prelude::*;

/// Chunk length for deterministic reductions. Fixed (not derived from the
/// thread count) so results do not depend on the pool size.
pub const CHUNK: usize = 2048;

/// Maps fixed chunks of `items` in parallel, returns partials in chunk order.
pub fn chunk_map<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(usize, &[T]) -> R + Sync,
) -> Vec<R> {
    items
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| f(ci * CHUNK, chunk))
        .collect()
}

/// Deterministic parallel sum of per-item f64 contributions.
pub fn sum_f64<T: Sync>(items: &[T], f: impl Fn(&T) -> f64 + Sync) -> f64 {
    chunk_map(items, |_, chunk| chunk.iter().map(&f).sum::<f64>())
        .into_iter()
        .sum()
}

/// Accumulates per-chunk dense buffers into `acc` in chunk order.
/// `scatter(start, chunk, buf)` fills a zeroed buffer the same length as `acc`.
pub fn scatter_add<T: Sync>(
    items: &[T],
    acc: &mut [f64],
    scatter: impl Fn(usize, &[T], &mut [f64]) + Sync,
) {
    let n = acc.len();
    let partials = chunk_map(items, |start, chunk| {
        let mut buf = vec![0.0; n];
        scatter(start, chunk, &mut buf);
        buf
    });
    for buf in partials {
        for (a, b) in acc.iter_mut().zip(buf.iter()) {
            *a += b;
        }
    }
}
