//! Execution-mode switch for the kernels.
//!
//! With the `parallel` feature the batch and chunk loops run on rayon's
//! pool; without it (or after `set_enabled(false)`) the same loops run on
//! the calling thread. Both modes split work identically and reduce partial
//! results in a fixed order, so they produce bit-identical outputs.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Elements per chunk for elementwise loops and chunked reductions.
pub const CHUNK: usize = 1 << 14;

pub fn is_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Switch between the rayon and the sequential path at runtime. A no-op
/// when the crate is built without the `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

/// Run `f` with the parallel path forced on or off, restoring the previous
/// setting afterwards.
pub fn with_mode<R>(parallel: bool, f: impl FnOnce() -> R) -> R {
    let prev = ENABLED.swap(parallel, Ordering::Relaxed);
    let out = f();
    ENABLED.store(prev, Ordering::Relaxed);
    out
}

/// `out[i] = f(i)` for every index, split across items.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk_len`-sized chunks.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if is_enabled() && data.len() > chunk_len {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Deterministic chunked sum: partial sums per `CHUNK` elements, combined
/// left to right.
pub fn sum(data: &[f64]) -> f64 {
    let n_chunks = data.len().div_ceil(CHUNK);
    let partials = map_indexed(n_chunks, |i| {
        let lo = i * CHUNK;
        let hi = (lo + CHUNK).min(data.len());
        data[lo..hi].iter().sum::<f64>()
    });
    partials.into_iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_is_mode_independent() {
        let data: Vec<f64> = (0..100_000).map(|i| ((i * 37) % 101) as f64 * 0.013).collect();
        let a = with_mode(true, || sum(&data));
        let b = with_mode(false, || sum(&data));
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
