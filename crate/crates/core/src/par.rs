//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature enabled and more than one worker thread
//! configured, the helpers dispatch to rayon. Every helper preserves input
//! order and performs no cross-item floating-point reduction, so the
//! parallel and sequential paths produce bit-identical results.

use std::sync::atomic::{AtomicU8, Ordering};

/// Execution strategy for batch-level work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

const UNSET: u8 = 0;
const SEQ: u8 = 1;
const PAR: u8 = 2;

static DEFAULT_EXEC: AtomicU8 = AtomicU8::new(UNSET);

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "CAID_THREADS";

/// Worker thread count requested through `CAID_THREADS` (default 1).
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

impl Exec {
    /// The process-wide default. Parallel only when more than one thread is
    /// requested and the `parallel` feature is compiled in.
    pub fn current() -> Exec {
        match DEFAULT_EXEC.load(Ordering::Relaxed) {
            SEQ => Exec::Sequential,
            PAR => Exec::Parallel,
            _ => {
                let e = if cfg!(feature = "parallel") && threads_from_env() > 1 {
                    Exec::Parallel
                } else {
                    Exec::Sequential
                };
                Exec::set_default(e);
                e
            }
        }
    }

    pub fn set_default(exec: Exec) {
        let v = match exec {
            Exec::Sequential => SEQ,
            Exec::Parallel => PAR,
        };
        DEFAULT_EXEC.store(v, Ordering::Relaxed);
    }

    fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Configures the global rayon pool from `CAID_THREADS`. Safe to call more
/// than once; later calls are ignored by rayon.
pub fn init_thread_pool() {
    let n = threads_from_env();
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Exec::set_default(if n > 1 && cfg!(feature = "parallel") {
        Exec::Parallel
    } else {
        Exec::Sequential
    });
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if exec.is_parallel() {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if exec.is_parallel() {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Applies `f(index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(exec: Exec, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    if exec.is_parallel() {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
