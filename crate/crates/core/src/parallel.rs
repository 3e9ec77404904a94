//! Fixed-size worker pool with results gathered in input order.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub struct WorkerPool {
    pool: rayon::ThreadPool,
    workers: usize,
}

impl WorkerPool {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
        Ok(Self { pool, workers })
    }

    /// One worker per available hardware thread.
    pub fn with_hardware_parallelism() -> Result<Self> {
        let n = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        Self::new(n)
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Applies `f` to every item; output `n` always belongs to item `n`.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        if self.workers == 1 {
            return items.iter().map(f).collect();
        }
        self.pool.install(|| items.par_iter().map(f).collect())
    }

    /// Like [`WorkerPool::map`], stopping at the first error in input order.
    pub fn try_map<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let pool = WorkerPool::new(3).unwrap();
        let items: Vec<u64> = (0..100).collect();
        assert_eq!(pool.map(&items, |v| v * 2), items.iter().map(|v| v * 2).collect::<Vec<_>>());
        assert!(WorkerPool::new(0).is_err());
    }

    #[test]
    fn first_error_wins() {
        let pool = WorkerPool::new(2).unwrap();
        let r = pool.try_map(&[1, 2, 3], |v| {
            if *v >= 2 {
                Err(Error::Training(format!("item {v}")))
            } else {
                Ok(*v)
            }
        });
        assert!(matches!(r, Err(Error::Training(m)) if m == "item 2"));
    }
}
