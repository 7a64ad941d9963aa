//! Execution-mode switch for data-parallel loops.
//!
//! Batch and Monte-Carlo loops map a function over indexed items. Each item
//! draws from its own RNG stream and results are collected by index, so the
//! sequential and parallel paths produce bit-identical output; the mode only
//! changes wall-clock time. Reductions over the collected vector always run
//! sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[derive(Default)]
pub enum ExecMode {
    Sequential,
    /// Rayon worker pool. Falls back to sequential when the `parallel`
    /// feature is compiled out.
    #[default]
    Parallel,
}


/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<U, F>(mode: ExecMode, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

/// Row-parallel kernel helper: runs `f` on each chunk of `out` (disjoint
/// output rows), sequentially or on the pool. Each chunk's arithmetic is
/// identical in both modes.
pub fn for_chunks<F>(mode: ExecMode, out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk > 0);
    match mode {
        ExecMode::Sequential => {
            for (i, c) in out.chunks_mut(chunk).enumerate() {
                f(i, c);
            }
        }
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            }
            #[cfg(not(feature = "parallel"))]
            {
                for (i, c) in out.chunks_mut(chunk).enumerate() {
                    f(i, c);
                }
            }
        }
    }
}
