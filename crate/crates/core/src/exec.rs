//! Execution strategy for the data-parallel kernels.
//!
//! Every hot loop in the crate (per-query kNN, per-block missing-token
//! construction) goes through the helpers here. With the `parallel` feature
//! they dispatch to rayon; without it, or when [`Execution::Sequential`] is
//! requested, they run on the calling thread. Results are identical either
//! way: work items never share mutable state and each writes a disjoint
//! output region.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this build can actually run work on more than one thread.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    #[cfg(feature = "parallel")]
    fn is_parallel(self) -> bool {
        self == Execution::Parallel && Self::parallel_available()
    }
}

impl std::str::FromStr for Execution {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "parallel" => Ok(Self::Parallel),
            other => Err(crate::error::Error::Config(format!("unknown execution mode {other:?}"))),
        }
    }
}

/// Evaluates `f` on `0..n` and collects the results in index order.
pub fn map_range<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk_len`-sized chunks of
/// `data` and collects the per-chunk results in order, stopping at the first
/// error.
pub fn try_map_chunks_mut<T, R, E, F>(exec: Execution, data: &mut [T], chunk_len: usize, f: F) -> Result<Vec<R>, E>
where
    T: Send,
    R: Send,
    E: Send,
    F: Fn(usize, &mut [T]) -> Result<R, E> + Sync + Send,
{
    assert!(chunk_len > 0, "chunk length must be positive");
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return data
            .par_chunks_mut(chunk_len)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect();
    }
    let _ = exec;
    data.chunks_mut(chunk_len).enumerate().map(|(i, c)| f(i, c)).collect()
}
