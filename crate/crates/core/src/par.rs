//! Data-parallel helpers.
//!
//! With the `parallel` feature the batch loops below run on the rayon pool;
//! without it (or with [`Exec::Sequential`]) they run in order on the caller's
//! thread. Results are always returned in input order, so anything reduced
//! from them afterwards is independent of scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for batch-level loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `Parallel` when the crate was built with rayon support.
    pub fn available() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Maps `f` over `0..n`, keeping output order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Maps `f` over a slice, keeping output order.
pub fn map_slice<A, T, F>(exec: Exec, items: &[A], f: F) -> Vec<T>
where
    A: Sync,
    T: Send,
    F: Fn(&A) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Caps the global worker pool. Returns `false` if the pool was already
/// initialised (the cap then has no effect) or the crate is sequential-only.
pub fn init_threads(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        false
    }
}

/// Reads `AETHER_THREADS` and applies it as the worker cap.
pub fn init_threads_from_env() {
    if let Some(n) = std::env::var("AETHER_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        init_threads(n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_strategies_preserve_order() {
        let a = map_indexed(Exec::Sequential, 100, |i| i * i);
        let b = map_indexed(Exec::Parallel, 100, |i| i * i);
        assert_eq!(a, b);
        let xs: Vec<u32> = (0..50).collect();
        assert_eq!(
            map_slice(Exec::Parallel, &xs, |x| x + 1),
            map_slice(Exec::Sequential, &xs, |x| x + 1)
        );
    }
}
