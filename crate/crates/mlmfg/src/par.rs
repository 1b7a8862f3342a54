//! Data-parallel map helpers. With the `parallel` feature (default) the
//! indexed map runs on the rayon pool; without it, sequentially. Both paths
//! produce identical results for pure closures: output order is by index and
//! no state is shared.

/// Sequential indexed map, always available (benchmarks compare against it).
pub fn seq_map_idx<R, F>(count: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..count).map(f).collect()
}

/// Indexed map over `0..count`, parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub fn par_map_idx<R, F>(count: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

/// Indexed map over `0..count`, parallel when the `parallel` feature is on.
#[cfg(not(feature = "parallel"))]
pub fn par_map_idx<R, F>(count: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    seq_map_idx(count, f)
}
