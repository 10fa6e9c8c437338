//! Data-parallel primitives with a sequential fallback.
//!
//! With the `parallel` feature the maps below fan out over the rayon pool;
//! without it they are plain iterators. Every helper returns results in index
//! order and every reduction is performed serially afterwards, so numeric
//! output is bit-identical regardless of the feature or the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, collecting results in order.
#[cfg(feature = "parallel")]
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    F: Fn(&S) -> T,
{
    items.iter().map(f).collect()
}

/// Fallible variant of [`map_range`]; the first error in index order wins.
pub fn try_map_range<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_range(n, f).into_iter().collect()
}

/// True when the crate was built with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Elements per chunk in [`accumulate`]. Fixed so that the summation tree does
/// not depend on the number of worker threads.
pub const ACCUMULATE_CHUNK: usize = 8;

/// Evaluates `f(i, grad_acc)` for `i in 0..n`, where `f` adds its gradient into
/// `grad_acc` and returns a scalar loss term. Elements are grouped into
/// fixed-size chunks that accumulate serially; chunk results are then summed
/// in chunk order. Returns `(sum of loss terms, summed gradient)`.
pub fn accumulate<E, F>(n: usize, grad_len: usize, f: F) -> Result<(f64, Vec<f64>), E>
where
    E: Send,
    F: Fn(usize, &mut [f64]) -> Result<f64, E> + Sync + Send,
{
    let chunks = n.div_ceil(ACCUMULATE_CHUNK);
    let parts = try_map_range(chunks, |c| {
        let mut grad = vec![0.0; grad_len];
        let mut loss = 0.0;
        let end = ((c + 1) * ACCUMULATE_CHUNK).min(n);
        for i in c * ACCUMULATE_CHUNK..end {
            loss += f(i, &mut grad)?;
        }
        Ok((loss, grad))
    })?;
    let mut total = 0.0;
    let mut grad = vec![0.0; grad_len];
    for (loss, part) in &parts {
        total += loss;
        for (a, p) in grad.iter_mut().zip(part) {
            *a += p;
        }
    }
    Ok((total, grad))
}
