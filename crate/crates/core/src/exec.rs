//! Execution policy for the data-parallel inner loops.
//!
//! Per-commodity projections/LMOs and per-agent price oracle calls are
//! independent, so they may fan out over a thread pool. Results are always
//! collected in index order, which keeps the parallel path bit-identical to
//! the sequential one.

/// Selects sequential or thread-pool execution for the inner loops.
///
/// `Parallel` requires the `parallel` cargo feature; without it the variant
/// silently degrades to sequential execution so that callers do not need to
/// feature-gate their own code.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecPolicy {
    #[default]
    Sequential,
    Parallel,
}

impl ExecPolicy {
    /// True when this policy actually fans out work.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecPolicy::Parallel
    }
}

/// Applies `f` to `0..n` and collects the results in index order.
pub(crate) fn map_collect<T, F>(policy: ExecPolicy, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = policy;
    (0..n).map(f).collect()
}

/// Fallible variant of [`map_collect`]. On failure returns the error with the
/// smallest index, independent of execution order.
pub(crate) fn try_map_collect<T, E, F>(policy: ExecPolicy, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_collect(policy, n, f).into_iter().collect()
}
