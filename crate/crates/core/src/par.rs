//! Ordered data-parallel maps. With the `parallel` feature, work fans out on
//! a rayon pool; results are always returned in input order so reductions
//! done by the caller are independent of the thread count.

use crate::error::{Error, Result};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "ATTNFLOW_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    Parallel {
        threads: usize,
    },
}

impl Execution {
    pub fn with_threads(threads: usize) -> Self {
        if threads <= 1 {
            Execution::Sequential
        } else {
            Execution::Parallel { threads }
        }
    }

    /// From `ATTNFLOW_THREADS`, defaulting to one worker.
    pub fn from_env() -> Result<Self> {
        match std::env::var(THREADS_ENV) {
            Err(_) => Ok(Execution::Sequential),
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .map(Self::with_threads)
                .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}"))),
        }
    }

    pub fn threads(self) -> usize {
        match self {
            Execution::Sequential => 1,
            Execution::Parallel { threads } => threads,
        }
    }

    /// `f(0), …, f(n − 1)` in order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => (0..n).map(f).collect(),
            Execution::Parallel { threads } => parallel_map_range(threads, n, f),
        }
    }

    /// Ordered map over a slice.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        self.map_range(items.len(), |i| f(&items[i]))
    }

    /// Ordered fallible map; the first error in input order wins.
    pub fn try_map_range<R, F>(self, n: usize, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> Result<R> + Sync + Send,
    {
        self.map_range(n, f).into_iter().collect()
    }
}

#[cfg(feature = "parallel")]
fn parallel_map_range<R, F>(threads: usize, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match pool(threads) {
        Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        None => (0..n).map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map_range<R, F>(_threads: usize, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
fn pool(threads: usize) -> Option<std::sync::Arc<rayon::ThreadPool>> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS.get_or_init(Default::default).lock().ok()?;
    if let Some(p) = pools.get(&threads) {
        return Some(p.clone());
    }
    let p = Arc::new(rayon::ThreadPoolBuilder::new().num_threads(threads).build().ok()?);
    pools.insert(threads, p.clone());
    Some(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        for exec in [Execution::Sequential, Execution::with_threads(4)] {
            let v = exec.map_range(100, |i| i * i);
            assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
        }
        assert_eq!(Execution::with_threads(1), Execution::Sequential);
    }

    #[test]
    fn first_error_wins() {
        let r = Execution::with_threads(3).try_map_range(10, |i| {
            if i >= 4 {
                Err(Error::Config(format!("{i}")))
            } else {
                Ok(i)
            }
        });
        assert!(matches!(r, Err(Error::Config(m)) if m == "4"));
    }
}
