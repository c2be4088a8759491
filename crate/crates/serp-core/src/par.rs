//! Data-parallel execution helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon;
//! without it they are plain loops. Every helper is order-preserving, so
//! output is bitwise identical across the two modes and across thread
//! counts: per-element work is independent and reductions either preserve
//! element order or use a total order with explicit tie-breaks.
//!
//! [`run_sequential`] forces the sequential path at runtime within a scope,
//! which is what the criterion benches use to compare both modes from one
//! binary.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
use std::cell::Cell;

#[cfg(feature = "parallel")]
thread_local! {
    static FORCE_SEQ: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with all `par` helpers on this thread forced to their
/// sequential path. Compiled without `parallel` this is a plain call.
pub fn run_sequential<T>(f: impl FnOnce() -> T) -> T {
    #[cfg(feature = "parallel")]
    {
        FORCE_SEQ.with(|c| c.set(true));
        let out = f();
        FORCE_SEQ.with(|c| c.set(false));
        out
    }
    #[cfg(not(feature = "parallel"))]
    f()
}

#[cfg(feature = "parallel")]
fn parallel_enabled(n: usize, min_par: usize) -> bool {
    n >= min_par && !FORCE_SEQ.with(|c| c.get())
}

/// Cap rayon's global thread pool. Call once, before any parallel work;
/// later calls are ignored (rayon's pool is build-once).
pub fn configure_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

/// `(0..n).map(f)` collected in index order.
pub fn map_collect<T, F>(n: usize, min_par: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled(n, min_par) {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = min_par;
    (0..n).map(f).collect()
}

/// Mutate `data` in disjoint chunks of `chunk_len`; `f(chunk_index, chunk)`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, min_par_chunks: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let n_chunks = data.len().div_ceil(chunk_len.max(1));
    #[cfg(feature = "parallel")]
    if parallel_enabled(n_chunks, min_par_chunks) {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = min_par_chunks;
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Index of the maximum of `key(i)` over `0..n`; ties go to the lower index.
///
/// The comparison is a total order on (key, index), so any reduction tree
/// yields the same winner.
pub fn argmax_by_key<F>(n: usize, min_par: usize, key: F) -> usize
where
    F: Fn(usize) -> f32 + Sync + Send,
{
    assert!(n > 0, "argmax over empty range");
    let better = |best: (f32, usize), cand: (f32, usize)| {
        if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
            cand
        } else {
            best
        }
    };
    #[cfg(feature = "parallel")]
    if parallel_enabled(n, min_par) {
        return (0..n)
            .into_par_iter()
            .map(|i| (key(i), i))
            .reduce(|| (f32::NEG_INFINITY, usize::MAX), better)
            .1;
    }
    let _ = min_par;
    let mut best = (f32::NEG_INFINITY, usize::MAX);
    for i in 0..n {
        best = better(best, (key(i), i));
    }
    best.1
}
