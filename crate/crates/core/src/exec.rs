//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature, work is spread over the rayon pool when the
//! caller asks for it. Results always come back in input order, so any
//! reduction the caller performs afterwards is order-deterministic.

/// Whether parallel execution is compiled in.
pub const PARALLEL_AVAILABLE: bool = cfg!(feature = "parallel");

pub fn map<I, R, F>(parallel: bool, items: Vec<I>, f: F) -> Vec<R>
where
    I: Send,
    R: Send,
    F: Fn(I) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel && items.len() > 1 {
        use rayon::prelude::*;
        return items.into_par_iter().map(f).collect();
    }
    let _ = parallel;
    items.into_iter().map(f).collect()
}

pub fn try_map<I, R, E, F>(parallel: bool, items: Vec<I>, f: F) -> Result<Vec<R>, E>
where
    I: Send,
    R: Send,
    E: Send,
    F: Fn(I) -> Result<R, E> + Sync + Send,
{
    map(parallel, items, f).into_iter().collect()
}
