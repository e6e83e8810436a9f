//! Per-sample fan-out: a rayon pool when the `parallel` feature is on and
//! more than one thread is requested, a plain loop otherwise.
//!
//! Results always come back in input order, so reductions done by the
//! caller over them are independent of the thread count.

#[cfg(feature = "parallel")]
use std::sync::Arc;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Debug)]
pub struct Exec {
    threads: usize,
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl Default for Exec {
    fn default() -> Self {
        Self::sequential()
    }
}

impl Exec {
    pub fn sequential() -> Self {
        Self {
            threads: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// `threads == 0` means one per available core. Without the `parallel`
    /// feature every request degrades to sequential execution.
    pub fn new(threads: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            let threads = if threads == 0 {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            } else {
                threads
            };
            if threads <= 1 {
                return Self::sequential();
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool builds");
            Self {
                threads,
                pool: Some(Arc::new(pool)),
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            Self::sequential()
        }
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect());
        }
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }

    pub fn map_mut<T, R, F>(&self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(usize, &mut T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| {
                items
                    .par_iter_mut()
                    .enumerate()
                    .map(|(i, x)| f(i, x))
                    .collect()
            });
        }
        items.iter_mut().enumerate().map(|(i, x)| f(i, x)).collect()
    }

    /// Runs independent jobs (e.g. whole training runs) concurrently.
    pub fn join<A, B, RA, RB>(&self, a: A, b: B) -> (RA, RB)
    where
        A: FnOnce() -> RA + Send,
        B: FnOnce() -> RB + Send,
        RA: Send,
        RB: Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.join(a, b);
        }
        (a(), b())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u64> = (0..100).collect();
        for threads in [1, 3] {
            let exec = Exec::new(threads);
            assert_eq!(exec.map(&items, |i, x| i as u64 * 1000 + x * x)[7], 7049);
            let mut m = items.clone();
            let out = exec.map_mut(&mut m, |_, x| {
                *x += 1;
                *x
            });
            assert_eq!(out, (1..101).collect::<Vec<_>>());
        }
    }
}
