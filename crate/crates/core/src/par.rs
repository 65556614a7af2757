//! Data-parallel loop helpers.
//!
//! With the `parallel` feature (default) the loops run on the rayon global
//! pool; without it they are plain iterators. Every output element is produced
//! by exactly one closure call, and the closure itself is sequential, so both
//! paths give bitwise-identical results regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many output elements the loop runs sequentially even when the
/// `parallel` feature is on.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_LEN: usize = 256;

/// Collects `f(0..n)` into a vector.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n >= MIN_PARALLEL_LEN {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Fills `out` in chunks of `chunk` elements; `f` receives the chunk index
/// and the mutable chunk.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        if out.len() >= MIN_PARALLEL_LEN && out.len() > chunk {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps over a slice of independent jobs (probes, instances).
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        return items.par_iter().map(f).collect();
    }
    #[allow(unreachable_code)]
    items.iter().map(f).collect()
}
