//! Order-preserving data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature, `parallel = true` dispatches on the rayon
//! global pool; otherwise (or without the feature) items are processed in
//! order on the calling thread. Results are always returned in input order,
//! so output never depends on the execution mode.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Whether this build can run anything in parallel.
pub const fn available() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if parallel {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], _parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}
