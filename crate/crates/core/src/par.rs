//! Execution helpers for the data-parallel inner loops (per-image gradient
//! batches, dataset generation, test-set inference).
//!
//! With the `parallel` feature (default) these fan out over rayon; without it
//! they run sequentially. Results are always collected in input order, so the
//! downstream reductions are deterministic regardless of thread count. The
//! `*_seq` variants are always sequential and exist so benchmarks can compare
//! both paths in one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential twin of [`map_collect`].
pub fn map_collect_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map `f` over indices `0..n`, preserving order.
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential twin of [`map_indices`].
pub fn map_indices_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let xs: Vec<u64> = (0..257).collect();
        let a = map_collect(&xs, |x| x * x + 1);
        let b = map_collect_seq(&xs, |x| x * x + 1);
        assert_eq!(a, b);
        let c = map_indices(100, |i| i as u64 * 3);
        let d = map_indices_seq(100, |i| i as u64 * 3);
        assert_eq!(c, d);
    }
}
