//! Execution strategy for per-row work.
//!
//! All data-parallel loops in the crate funnel through [`map_collect`]: a
//! parallel map whose output order matches the input order, followed by
//! whatever sequential reduction the caller performs. Because the reduction
//! itself always runs in a fixed order, results are bit-identical whether the
//! map ran on one thread or many.
//!
//! The `parallel` feature (on by default) backs the map with rayon. Without
//! it, or when [`force_sequential`] is set, the map degrades to a plain
//! sequential loop. The runtime switch exists so benchmarks can compare both
//! paths inside a single binary.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Globally disable the rayon path at runtime (primarily for benchmarks).
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// Whether the parallel path is currently active.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Map `f` over `0..n`, collecting results in index order.
///
/// The closure must be a pure function of its index (given the captured
/// state); under that contract the output is independent of thread count.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let out = map_collect(1000, |i| i * i);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i * i);
        }
    }

    #[test]
    fn sequential_override_matches_parallel() {
        let par = map_collect(257, |i| (i as f64).sin());
        force_sequential(true);
        let seq = map_collect(257, |i| (i as f64).sin());
        force_sequential(false);
        assert_eq!(par, seq);
    }
}
