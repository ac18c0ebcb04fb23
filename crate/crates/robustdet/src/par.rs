//! Data-parallel helpers with a sequential fallback.
//!
//! All hot loops in the crate fan out over independent slots (images in a
//! batch, grid points in a sweep) through the functions here. With the
//! `parallel` feature (default) they run on the rayon thread pool; without
//! it they compile to plain loops. [`set_parallel`] flips between the two at
//! runtime so benchmarks can compare both paths in a single build.
//!
//! Determinism: every helper assigns results to pre-determined slots and all
//! floating-point reductions in the crate happen sequentially over those
//! slots afterwards, so parallel and sequential execution produce identical
//! bits.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enables or disables the rayon path at runtime. No-op without the
/// `parallel` feature. Returns the previous value.
pub fn set_parallel(enabled: bool) -> bool {
    PARALLEL.swap(enabled, Ordering::SeqCst)
}

/// True when the rayon path is compiled in and currently enabled.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::SeqCst)
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if PARALLEL.load(Ordering::SeqCst) {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Runs `f(i, &mut slots[i])` for every slot.
pub fn for_each_slot<T, F>(slots: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if PARALLEL.load(Ordering::SeqCst) {
        slots
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, slot)| f(i, slot));
        return;
    }
    for (i, slot) in slots.iter_mut().enumerate() {
        f(i, slot);
    }
}

/// Splits `data` into mutable chunks of `chunk_len` and runs
/// `f(chunk_index, chunk)` over them.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    if PARALLEL.load(Ordering::SeqCst) {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
        return;
    }
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

/// Like [`for_each_chunk`] but collects one result per chunk, in chunk order.
pub fn map_chunks<T, R, F>(data: &mut [T], chunk_len: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut [T]) -> R + Sync + Send,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    if PARALLEL.load(Ordering::SeqCst) {
        return data
            .par_chunks_mut(chunk_len)
            .enumerate()
            .map(|(i, chunk)| f(i, chunk))
            .collect();
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .map(|(i, chunk)| f(i, chunk))
        .collect()
}
