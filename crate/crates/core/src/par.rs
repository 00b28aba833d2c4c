//! Order-preserving map over a batch, on a rayon pool or on the calling thread.

#[cfg(feature = "parallel")]
use std::sync::Arc;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "AVT_THREADS";

/// Executes per-item work either sequentially or on a dedicated pool.
///
/// Results always come back in input order, so any reduction performed by the
/// caller over them is independent of scheduling.
#[derive(Clone)]
pub struct Pool {
    #[cfg(feature = "parallel")]
    inner: Option<Arc<rayon::ThreadPool>>,
    threads: usize,
}

impl std::fmt::Debug for Pool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pool").field("threads", &self.threads).finish()
    }
}

impl Pool {
    pub fn sequential() -> Self {
        Self {
            #[cfg(feature = "parallel")]
            inner: None,
            threads: 1,
        }
    }

    /// A pool of `threads` workers; `threads <= 1`, or a build without the
    /// `parallel` feature, yields the sequential executor.
    pub fn new(threads: usize) -> Self {
        #[cfg(feature = "parallel")]
        if threads > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                return Self {
                    inner: Some(Arc::new(pool)),
                    threads,
                };
            }
        }
        let _ = threads;
        Self::sequential()
    }

    /// Sized from `AVT_THREADS`, falling back to the available parallelism.
    pub fn from_env() -> Self {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Self::new(threads)
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn is_parallel(&self) -> bool {
        self.threads > 1
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.inner {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }
}

impl Default for Pool {
    fn default() -> Self {
        Self::sequential()
    }
}
