//! Data-parallel execution over independent work items (trees, grid cells).
//!
//! With the `parallel` feature (default) work is spread over the rayon
//! global pool; without it every call runs sequentially. Results are always
//! returned in index order, so output never depends on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How independent work items are executed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Execution {
    /// One item after another on the calling thread.
    Sequential,
    /// Items spread over the rayon pool. Falls back to sequential when the
    /// crate is built without the `parallel` feature.
    #[default]
    Parallel,
}

impl Execution {
    /// True when this mode will actually use more than the calling thread.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Evaluate `f(0..n)` and collect the results in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = exec;
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] but stops at the first error in index order.
pub fn try_map_indexed<T, E, F>(exec: Execution, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    // Collecting everything first keeps the reported error deterministic:
    // rayon's short-circuiting collect may surface any failing index.
    map_indexed(exec, n, f).into_iter().collect()
}
