//! Data-parallel helpers with a sequential fallback.
//!
//! With the default `parallel` feature the maps below fan out over rayon;
//! without it they run sequentially with identical results. Output order is
//! always the input order, so reductions over the results are deterministic
//! regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over a slice, collecting results in input order.
#[cfg(feature = "parallel")]
pub fn map_slice<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    items.par_iter().map(f).collect()
}

/// Map over a slice, collecting results in input order.
#[cfg(not(feature = "parallel"))]
pub fn map_slice<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Map over an index range `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_range<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    (0..n).into_par_iter().map(f).collect()
}

/// Map over an index range `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_range<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    (0..n).map(f).collect()
}

/// Always-sequential variant of [`map_slice`], kept for benchmarks that
/// compare the two execution paths.
pub fn map_slice_seq<T, U, F: Fn(&T) -> U>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Always-sequential variant of [`map_range`].
pub fn map_range_seq<U, F: Fn(usize) -> U>(n: usize, f: F) -> Vec<U> {
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 * 0.5).collect();
        let a = map_slice(&xs, |x| x * x + 1.0);
        let b = map_slice_seq(&xs, |x| x * x + 1.0);
        assert_eq!(a, b);
        let c = map_range(50, |i| i * 3);
        let d = map_range_seq(50, |i| i * 3);
        assert_eq!(c, d);
    }
}
