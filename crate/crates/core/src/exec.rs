//! Batch execution helpers: data-parallel with rayon when the `parallel`
//! feature is enabled, plain iterators otherwise.
//!
//! Reductions over the mapped results stay sequential and ordered everywhere
//! in this crate, so results are bit-identical with and without `parallel`.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order. Parallel under the `parallel`
/// feature, sequential otherwise.
#[cfg(feature = "parallel")]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving order. Parallel under the `parallel`
/// feature, sequential otherwise.
#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Always-sequential twin of [`map_collect`]. Kept public so benchmarks can
/// compare the two paths under identical workloads.
pub fn map_collect_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Explicitly parallel twin of [`map_collect`], for benches.
#[cfg(feature = "parallel")]
pub fn map_collect_par<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Map `f` over `0..n`, preserving order. Parallel under the `parallel`
/// feature, sequential otherwise.
#[cfg(feature = "parallel")]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, preserving order. Parallel under the `parallel`
/// feature, sequential otherwise.
#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_collect_preserves_order() {
        let xs: Vec<u64> = (0..10_000).collect();
        let a = map_collect(&xs, |x| x * 3);
        let b = map_collect_seq(&xs, |x| x * 3);
        assert_eq!(a, b);
    }

    #[test]
    fn map_range_matches_sequential() {
        let a = map_range(1000, |i| (i as f64).sqrt());
        let b: Vec<f64> = (0..1000).map(|i| (i as f64).sqrt()).collect();
        assert_eq!(a, b);
    }
}
