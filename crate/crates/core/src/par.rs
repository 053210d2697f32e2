//! Data-parallel helpers. With the `parallel` feature these run on rayon;
//! without it they are plain sequential loops. Every helper preserves
//! output order and never reorders floating-point reductions, so results
//! are identical either way and independent of the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
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

/// `items.iter().map(f).collect()`, possibly in parallel.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Calls `f(row_index, row)` on each `width`-sized chunk of `data`.
pub fn for_each_row<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        // Small matrices are faster without task overhead.
        if data.len() >= 4096 {
            data.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
            return;
        }
    }
    data.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

/// Runs `f` on a pool of `threads` workers (0 means the rayon default).
/// Without the `parallel` feature this just calls `f`.
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(f),
            Err(err) => {
                log::warn!("thread pool unavailable ({err}); running on the global pool");
                f()
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
