//! Execution-mode switch for data-parallel loops.
//!
//! Every parallel loop in this crate maps independent work items to slots of
//! an output vector and combines them in a fixed order, so results are
//! bit-identical across modes and worker counts. With the `parallel` feature
//! disabled, [`Parallelism::Rayon`] does not exist and everything runs
//! sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Default for Parallelism {
    fn default() -> Self {
        Parallelism::auto()
    }
}

impl Parallelism {
    /// Rayon when compiled in, sequential otherwise.
    pub fn auto() -> Self {
        #[cfg(feature = "parallel")]
        {
            Parallelism::Rayon
        }
        #[cfg(not(feature = "parallel"))]
        {
            Parallelism::Sequential
        }
    }

    pub fn is_parallel(self) -> bool {
        self != Parallelism::Sequential
    }
}

/// Maps `f` over `0..len`, preserving index order in the output.
pub fn map_indexed<U, F>(mode: Parallelism, len: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode {
        Parallelism::Sequential => (0..len).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => (0..len).into_par_iter().map(f).collect(),
    }
}

/// Maps `f` over a slice, preserving order.
pub fn map_slice<T, U, F>(mode: Parallelism, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode {
        Parallelism::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => items.par_iter().map(f).collect(),
    }
}

/// Runs `f` for each chunk of `out`, chunk `i` covering
/// `[i * chunk, min((i + 1) * chunk, len))`. Chunks are disjoint, so the
/// closure may write freely into its own chunk.
pub fn for_each_chunk<T, F>(mode: Parallelism, out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    match mode {
        Parallelism::Sequential => {
            for (i, c) in out.chunks_mut(chunk).enumerate() {
                f(i, c);
            }
        }
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }
    }
}
