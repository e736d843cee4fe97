//! Execution-mode switch between sequential and data-parallel maps.
//!
//! With the `parallel` feature enabled (the default), `ExecMode::Parallel`
//! fans independent work items (evaluation rollouts, per-episode gradient
//! passes, sweep runs) across a rayon pool. Reductions always happen
//! sequentially over the ordered result vector, so both modes produce
//! bit-identical floating-point results; the feature and the mode only trade
//! wall-clock time.

use serde::{Deserialize, Serialize};

/// How to map independent work items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Plain in-order iteration on the calling thread.
    Sequential,
    /// Ordered map over a rayon pool (requires the `parallel` feature;
    /// falls back to sequential iteration when compiled without it).
    #[default]
    Parallel,
}

impl ExecMode {
    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map_indexed<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        {
            if self == ExecMode::Parallel {
                use rayon::prelude::*;
                return (0..n).into_par_iter().map(f).collect();
            }
        }
        (0..n).map(f).collect()
    }

    /// Maps `f` over a slice, returning results in input order.
    pub fn map_slice<'a, S, T, F>(self, items: &'a [S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(&'a S) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        {
            if self == ExecMode::Parallel {
                use rayon::prelude::*;
                return items.par_iter().map(f).collect();
            }
        }
        items.iter().map(f).collect()
    }
}
