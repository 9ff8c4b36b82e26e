//! Data-parallel helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it, or when the
//! current pool has a single thread, they run the plain sequential loop. Every
//! helper returns results in index order, and reductions that matter for
//! floating-point reproducibility go through [`map_chunks`], whose chunk
//! boundaries depend only on the input length. Outputs are therefore identical
//! for any thread count.

use std::ops::Range;

/// Fixed chunk length for ordered reductions. Never derive this from the
/// thread count.
pub const REDUCTION_CHUNK: usize = 2048;

/// Number of worker threads the helpers will use from the calling context.
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

fn sequential() -> bool {
    current_threads() <= 1
}

/// `(0..n).map(f)` collected in order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    if sequential() {
        return (0..n).map(f).collect();
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    unreachable!()
}

/// `items.iter().map(f)` collected in order.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Send + Sync,
{
    if sequential() {
        return items.iter().map(f).collect();
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    unreachable!()
}

/// Applies `f` to consecutive ranges of length `chunk` covering `0..n` and
/// returns the partial results in range order.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Send + Sync,
{
    assert!(chunk > 0, "chunk length must be positive");
    let n_chunks = n.div_ceil(chunk);
    map_range(n_chunks, |c| {
        let start = c * chunk;
        f(start..(start + chunk).min(n))
    })
}

/// Runs `f` with the helpers limited to `threads` workers. `None` keeps the
/// ambient pool (all cores by default).
pub fn with_threads<R, F>(threads: Option<usize>, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    match threads {
        None => f(),
        #[cfg(feature = "parallel")]
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("could not build a {n}-thread pool ({e}); using the global pool");
                f()
            }
        },
        #[cfg(not(feature = "parallel"))]
        Some(_) => f(),
    }
}
