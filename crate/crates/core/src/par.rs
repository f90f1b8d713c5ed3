//! Per-client fan-out with a sequential fallback.
//!
//! With the `parallel` feature (default) the work runs on the rayon pool;
//! without it, or with [`Execution::Sequential`], it runs in index order.
//! Results are always returned in index order, so outputs are identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `true` if this build can actually run work concurrently.
    pub fn is_concurrent(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

pub fn map_indexed<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_concurrent() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

pub fn map_mut<T, R, F>(exec: Execution, items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_concurrent() {
        return items.par_iter_mut().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = exec;
    items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
}
