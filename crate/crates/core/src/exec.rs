//! Data-parallel execution with a sequential fallback.
//!
//! Every parallel call site in the crate goes through [`Exec`], so results are
//! ordered and bit-identical whichever mode runs them. Building without the
//! `parallel` feature turns [`Exec::Parallel`] into a plain sequential loop.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `f(0), f(1), …, f(n-1)` collected in index order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            Exec::Parallel => par_map_range(n, f),
        }
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        self.map_range(items.len(), |i| f(&items[i]))
    }

    /// Fallible variant of [`Exec::map_range`]; the first error in index order wins.
    pub fn try_map_range<R, E, F>(self, n: usize, f: F) -> Result<Vec<R>, E>
    where
        R: Send,
        E: Send,
        F: Fn(usize) -> Result<R, E> + Sync + Send,
    {
        self.map_range(n, f).into_iter().collect()
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

#[cfg(feature = "parallel")]
fn par_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Runs `op` with at most `jobs` worker threads for every [`Exec::Parallel`]
/// call made inside it. `jobs == 0` means the global default pool.
#[cfg(feature = "parallel")]
pub fn with_jobs<R: Send>(jobs: usize, op: impl FnOnce() -> R + Send) -> R {
    if jobs == 0 {
        return op();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(op),
        Err(e) => {
            log::warn!("could not build a {jobs}-thread pool ({e}); using the global pool");
            op()
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_jobs<R: Send>(_jobs: usize, op: impl FnOnce() -> R + Send) -> R {
    op()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let f = |i: usize| (i as f64).sqrt() * 3.0;
        let a = Exec::Sequential.map_range(1000, f);
        let b = Exec::Parallel.map_range(1000, f);
        assert_eq!(a, b);
        assert_eq!(a[9], 9.0);
    }

    #[test]
    fn first_error_in_order_is_returned() {
        let r: Result<Vec<usize>, usize> =
            Exec::Parallel.try_map_range(100, |i| if i % 30 == 29 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(29));
    }

    #[test]
    fn with_jobs_runs_closure() {
        assert_eq!(
            with_jobs(2, || Exec::Parallel.map_range(4, |i| i * 2)),
            vec![0, 2, 4, 6]
        );
    }
}
