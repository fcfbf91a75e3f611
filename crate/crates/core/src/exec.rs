//! Data-parallel helpers.
//!
//! With the `parallel` feature the loops run on the rayon pool; without it
//! they run sequentially. Every helper preserves output order and reduces in
//! a fixed order, so results do not depend on the worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fixed block size for chunked reductions; independent of the thread count.
pub const REDUCE_BLOCK: usize = 2048;

/// `(0..n).map(f).collect()`, in parallel when enabled.
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

/// Calls `f(chunk_index, chunk)` on consecutive chunks of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(c, s)| f(c, s));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(c, s)| f(c, s));
    }
}

/// Block-wise reduction over `0..n`: `block(lo, hi)` produces a partial
/// result for `lo..hi`, partials are merged left to right with `merge`.
pub fn reduce_blocks<T, B, M>(n: usize, block: B, merge: M) -> Option<T>
where
    T: Send,
    B: Fn(usize, usize) -> T + Sync + Send,
    M: Fn(T, T) -> T,
{
    let n_blocks = n.div_ceil(REDUCE_BLOCK);
    let partials = map_indexed(n_blocks, |b| {
        let lo = b * REDUCE_BLOCK;
        let hi = ((b + 1) * REDUCE_BLOCK).min(n);
        block(lo, hi)
    });
    partials.into_iter().reduce(merge)
}

/// Number of worker threads the helpers will use.
pub fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (ignored without the
/// `parallel` feature).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .expect("failed to build thread pool");
        pool.install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Sum of `values` in fixed block order.
pub fn ordered_sum(values: &[f64]) -> f64 {
    reduce_blocks(values.len(), |lo, hi| values[lo..hi].iter().sum::<f64>(), |a, b| a + b)
        .unwrap_or(0.0)
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = ordered_sum(values) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = reduce_blocks(
        n,
        |lo, hi| values[lo..hi].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>(),
        |a, b| a + b,
    )
    .unwrap_or(0.0);
    let var = ss / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(values: &[f64]) -> f64 {
    let (_, se) = mean_stderr(values);
    se * se * values.len() as f64
}
