//! Execution-mode selection for the data-parallel inner loops.
//!
//! Batch forward/backward passes and dev-set evaluation map independently
//! over instances, each on its own tape. With the `parallel` feature
//! (default) these maps fan out over rayon; results are collected in input
//! order and reduced sequentially, so parallel and sequential runs produce
//! bit-identical values. Without the feature the crate has no rayon
//! dependency and everything runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How instance-level maps are driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    /// Falls back to sequential when the `parallel` feature is disabled.
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Maps `f` over `items`, preserving input order in the output.
pub fn map_collect<T, U, F>(items: &[T], mode: ExecMode, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.iter().map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                items.par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().map(f).collect()
            }
        }
    }
}
