//! Size control for the compute worker pool shared by the numeric kernels.
//!
//! Kernels split work so each output element is computed by one sequential
//! loop and cross-sample reductions run in sample order, so results do not
//! depend on the number of workers.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

static CONFIGURED: AtomicUsize = AtomicUsize::new(0);

pub const DEFAULT_WORKER_THREADS: usize = 8;

/// Fixes the global pool size. Must run before any parallel kernel executes;
/// afterwards the pool already exists and this returns an error.
pub fn set_worker_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("worker thread count must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .thread_name(|i| format!("icnt-worker-{i}"))
        .build_global()
        .map_err(|e| Error::WorkerPool(format!("pool already created ({e}); set the thread count before training")))?;
    CONFIGURED.store(n, Ordering::SeqCst);
    Ok(())
}

/// Threads in the pool the calling code runs on.
pub fn worker_threads() -> usize {
    rayon::current_num_threads()
}

/// Value passed to a successful [`set_worker_threads`], if any.
pub fn configured_worker_threads() -> Option<usize> {
    match CONFIGURED.load(Ordering::SeqCst) {
        0 => None,
        n => Some(n),
    }
}

/// Runs `f` on a dedicated pool of `n` threads (used to compare thread counts
/// within one process).
pub fn with_worker_threads<R: Send>(n: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if n == 0 {
        return Err(Error::InvalidArgument("worker thread count must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::WorkerPool(e.to_string()))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_threads_rejected() {
        assert!(set_worker_threads(0).is_err());
        assert!(with_worker_threads(0, || ()).is_err());
    }

    #[test]
    fn scoped_pool_reports_its_size() {
        assert_eq!(with_worker_threads(3, worker_threads).unwrap(), 3);
    }
}
