//! Data-parallel helpers. With the `parallel` feature these fan out over
//! rayon's pool; without it they run the same closures in order.
//!
//! Every helper writes disjoint output regions and every reduction happens
//! inside a single closure invocation, so results are bitwise identical
//! between the two builds and across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Calls `f(index, chunk)` for each `chunk`-sized piece of `data`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Evaluates `f` on `0..n`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    (0..n).map(f).collect()
}

/// Number of worker threads kernels will fan out to.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// A reusable worker pool of fixed size. The sequential build ignores the
/// size and runs work inline.
pub struct Pool {
    #[cfg(feature = "parallel")]
    inner: Option<rayon::ThreadPool>,
}

impl Pool {
    pub fn new(threads: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            let inner = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build()
                .ok();
            Pool { inner }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            Pool {}
        }
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.inner {
            return pool.install(f);
        }
        f()
    }
}

/// Runs `f` on a pool of `threads` workers (or inline for the sequential build).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    Pool::new(threads).install(f)
}
